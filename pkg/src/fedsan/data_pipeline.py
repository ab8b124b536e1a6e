"""Datasets, client partitioning, trigger stamping and verification environments.

Images are float32 tensors in [0, 1] with shape (C, H, W); datasets are kept
as whole tensors since everything here fits in memory and vectorized stamping
is much faster than per-sample transforms.
"""

import dataclasses

import numpy as np
import torch

from .rng import np_gen

# ---------------------------------------------------------------------------
# dataset containers and loaders


@dataclasses.dataclass
class DatasetSplit:
    """A train/test split held as dense tensors."""

    train_x: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    train_y: torch.Tensor  # (N,) int64
    test_x: torch.Tensor
    test_y: torch.Tensor
    num_classes: int
    image_shape: tuple  # (C, H, W)

    def __post_init__(self):
        assert self.train_x.dtype == torch.float32
        assert self.train_y.dtype == torch.int64
        assert tuple(self.train_x.shape[1:]) == tuple(self.image_shape)
        assert tuple(self.test_x.shape[1:]) == tuple(self.image_shape)
        assert float(self.train_x.min()) >= 0.0 and float(self.train_x.max()) <= 1.0
        assert int(self.train_y.max()) < self.num_classes and int(self.train_y.min()) >= 0


def _from_numpy(tr_x, tr_y, te_x, te_y, num_classes):
    tr_x = torch.as_tensor(tr_x, dtype=torch.float32)
    te_x = torch.as_tensor(te_x, dtype=torch.float32)
    return DatasetSplit(
        train_x=tr_x,
        train_y=torch.as_tensor(tr_y, dtype=torch.int64),
        test_x=te_x,
        test_y=torch.as_tensor(te_y, dtype=torch.int64),
        num_classes=num_classes,
        image_shape=tuple(tr_x.shape[1:]),
    )


def _load_fmnist(root):
    from torchvision import datasets

    try:
        tr = datasets.FashionMNIST(root, train=True, download=True)
        te = datasets.FashionMNIST(root, train=False, download=True)
    except Exception as e:  # no network / no cached files
        raise RuntimeError(
            f"fmnist is unavailable: could not read or download FashionMNIST under "
            f"'{root}' ({type(e).__name__}: {e}). Place the raw idx files in "
            f"'{root}/FashionMNIST/raw' or run on a machine with network access."
        ) from e
    tr_x = tr.data.numpy()[:, None, :, :] / 255.0
    te_x = te.data.numpy()[:, None, :, :] / 255.0
    return _from_numpy(tr_x, tr.targets.numpy(), te_x, te.targets.numpy(), 10)


def _load_cifar10(root):
    from torchvision import datasets

    try:
        tr = datasets.CIFAR10(root, train=True, download=True)
        te = datasets.CIFAR10(root, train=False, download=True)
    except Exception as e:
        raise RuntimeError(
            f"cifar10 is unavailable: could not read or download CIFAR-10 under "
            f"'{root}' ({type(e).__name__}: {e}). Place cifar-10-batches-py in "
            f"'{root}' or run on a machine with network access."
        ) from e
    tr_x = tr.data.transpose(0, 3, 1, 2) / 255.0
    te_x = te.data.transpose(0, 3, 1, 2) / 255.0
    return _from_numpy(tr_x, np.asarray(tr.targets), te_x, np.asarray(te.targets), 10)


def _synthetic_tiny(seed):
    """3-class 8x8 RGB toy set: ramps and a checkerboard plus noise."""
    rng = np_gen(seed, "synthetic_tiny")
    h = w = 8
    yy, xx = np.mgrid[0:h, 0:w]
    bases = [
        np.broadcast_to(xx / (w - 1), (3, h, w)),
        np.broadcast_to(yy / (h - 1), (3, h, w)),
        np.broadcast_to((yy + xx) % 2, (3, h, w)).astype(float),
    ]

    def make(n):
        xs, ys = [], []
        for i in range(n):
            c = i % 3
            tint = rng.uniform(0.6, 1.0, size=(3, 1, 1))
            img = bases[c] * tint + rng.normal(0, 0.1, size=(3, h, w))
            xs.append(np.clip(img, 0, 1))
            ys.append(c)
        return np.stack(xs).astype(np.float32), np.array(ys)

    tr_x, tr_y = make(600)
    te_x, te_y = make(150)
    return _from_numpy(tr_x, tr_y, te_x, te_y, 3)


def _glyph_mask(cls, h, w, cy, cx, r):
    """Boolean (h, w) mask for one of ten large centered shape families.

    All glyphs are big low-frequency blobs, deliberately unlike the small
    high-frequency corner stamps used as triggers.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy**2 + dx**2)
    if cls == 0:
        return dist <= 0.85 * r
    if cls == 1:
        return (dist <= r) & (dist >= r - 2.4)
    if cls == 2:  # plus
        return ((np.abs(dx) <= 2.0) | (np.abs(dy) <= 2.0)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if cls == 3:  # X
        return (dist <= r + 1) & ((np.abs(dy - dx) <= 2.0) | (np.abs(dy + dx) <= 2.0))
    if cls == 4:  # diamond
        return np.abs(dy) + np.abs(dx) <= r
    if cls == 5:  # triangle, apex up
        return (dy >= -0.7 * r) & (dy <= 0.7 * r) & (np.abs(dx) <= 0.75 * (dy + 0.7 * r))
    if cls == 6:  # bowtie
        return (np.abs(dx) <= 0.9 * r) & (np.abs(dy) <= 0.75 * np.abs(dx))
    if cls == 7:  # H
        bar = np.abs(dy) <= r
        return ((np.abs(dx - 0.65 * r) <= 1.6) & bar) | ((np.abs(dx + 0.65 * r) <= 1.6) & bar) \
            | ((np.abs(dy) <= 1.6) & (np.abs(dx) <= 0.65 * r))
    if cls == 8:  # T
        return ((np.abs(dy + 0.7 * r) <= 1.6) & (np.abs(dx) <= r)) \
            | ((np.abs(dx) <= 1.6) & (dy >= -0.7 * r) & (dy <= r))
    if cls == 9:  # Z
        return ((np.abs(dy + 0.7 * r) <= 1.4) & (np.abs(dx) <= 0.8 * r)) \
            | ((np.abs(dy - 0.7 * r) <= 1.4) & (np.abs(dx) <= 0.8 * r)) \
            | ((np.abs(dy + dx) <= 1.8) & (np.abs(dy) <= 0.7 * r) & (np.abs(dx) <= 0.8 * r))
    raise ValueError(cls)


def _shapes28(seed):
    """10-class 28x28 grayscale glyph dataset with pose/intensity jitter."""
    rng = np_gen(seed, "shapes28")
    h = w = 28

    def make(n):
        xs, ys = [], []
        for i in range(n):
            c = i % 10
            cy = 13.5 + rng.uniform(-3, 3)
            cx = 13.5 + rng.uniform(-3, 3)
            r = rng.uniform(6.0, 8.5)
            fg = rng.uniform(0.7, 1.0)
            img = np.abs(rng.normal(0, 0.06, size=(h, w)))
            img[_glyph_mask(c, h, w, cy, cx, r)] = fg
            img += rng.normal(0, 0.04, size=(h, w))
            xs.append(np.clip(img, 0, 1)[None])
            ys.append(c)
        return np.stack(xs).astype(np.float32), np.array(ys)

    tr_x, tr_y = make(8000)
    te_x, te_y = make(2000)
    return _from_numpy(tr_x, tr_y, te_x, te_y, 10)


def load_dataset(name, root="data", seed=0):
    """Load a dataset by name.

    fmnist / cifar10 read (or download) the standard archives under `root`;
    synthetic_tiny and shapes28 are generated deterministically from `seed`.
    """
    if name == "fmnist":
        return _load_fmnist(root)
    if name == "cifar10":
        return _load_cifar10(root)
    if name == "synthetic_tiny":
        return _synthetic_tiny(seed)
    if name == "shapes28":
        return _shapes28(seed)
    raise ValueError(f"unknown dataset '{name}'")


# ---------------------------------------------------------------------------
# partitioning


@dataclasses.dataclass
class Partition:
    """Disjoint client shards plus a server-held defense set."""

    client_indices: list  # list of int64 np.ndarray
    defense_indices: np.ndarray

    def __post_init__(self):
        seen = set(self.defense_indices.tolist())
        assert len(seen) == len(self.defense_indices)
        for idx in self.client_indices:
            assert len(idx) > 0
            s = set(idx.tolist())
            assert len(s) == len(idx)
            assert not (s & seen)
            seen |= s


def _largest_remainder(fracs, total):
    """Integer allocation of `total` items proportional to `fracs`."""
    raw = fracs * total
    base = np.floor(raw).astype(int)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_data(split, num_clients, scheme="iid", alpha=0.5, defense_fraction=0.05, seed=0):
    """Split train indices into `num_clients` shards and a defense set.

    iid: equal-size shards (off by at most one).  dirichlet: per-class
    proportions drawn from Dir(alpha), so smaller alpha means more skew.
    """
    n = len(split.train_y)
    rng = np_gen(seed, "partition", scheme, num_clients)
    perm = rng.permutation(n)
    n_def = int(round(defense_fraction * n))
    defense = np.sort(perm[:n_def])
    rest = perm[n_def:]

    if scheme == "iid":
        sizes = np.full(num_clients, len(rest) // num_clients)
        sizes[: len(rest) % num_clients] += 1
        shards, at = [], 0
        for s in sizes:
            shards.append(np.sort(rest[at : at + s]))
            at += s
    elif scheme == "dirichlet":
        labels = split.train_y.numpy()[rest]
        shards = [[] for _ in range(num_clients)]
        for c in range(split.num_classes):
            pool = rest[labels == c]
            rng.shuffle(pool)
            props = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder(props, len(pool))
            at = 0
            for k in range(num_clients):
                shards[k].extend(pool[at : at + counts[k]].tolist())
                at += counts[k]
        shards = [np.sort(np.array(s, dtype=np.int64)) for s in shards]
        # dirichlet can starve a client outright; donate one sample from the
        # largest shard so every client can train
        for k in range(num_clients):
            if len(shards[k]) == 0:
                donor = int(np.argmax([len(s) for s in shards]))
                shards[k] = shards[donor][:1]
                shards[donor] = shards[donor][1:]
    else:
        raise ValueError(f"unknown scheme '{scheme}'")
    return Partition(client_indices=shards, defense_indices=defense)


# ---------------------------------------------------------------------------
# triggers


@dataclasses.dataclass
class TriggerSpec:
    """A blending trigger: x' = (1 - mask) * x + mask * pattern."""

    kind: str  # "patch" | "blend"
    mask: torch.Tensor  # (H, W) in [0, 1]
    pattern: torch.Tensor  # (C, H, W) in [0, 1]
    target_class: int

    def __post_init__(self):
        assert self.mask.dim() == 2 and self.pattern.dim() == 3
        assert self.pattern.shape[1:] == self.mask.shape
        assert float(self.mask.min()) >= 0.0 and float(self.mask.max()) <= 1.0
        assert float(self.pattern.min()) >= 0.0 and float(self.pattern.max()) <= 1.0


def stamp(x, mask, pattern):
    """Blend a trigger onto one image or a batch (never in place)."""
    m = mask.to(x.dtype)
    return (1.0 - m) * x + m * pattern.to(x.dtype)


_STENCILS = ("square", "cross", "corner_l", "stripes", "checker", "frame", "dot", "tee")


def _stencil_block(name, s):
    """An (s, s) binary block for a named stencil."""
    yy, xx = np.mgrid[0:s, 0:s]
    if name == "square":
        b = np.ones((s, s))
    elif name == "cross":
        mid = (s - 1) / 2
        b = ((np.abs(yy - mid) <= 0.5) | (np.abs(xx - mid) <= 0.5)).astype(float)
    elif name == "corner_l":
        b = ((xx == 0) | (yy == s - 1)).astype(float)
    elif name == "stripes":
        b = (yy % 2 == 0).astype(float)
    elif name == "checker":
        b = ((yy + xx) % 2 == 0).astype(float)
    elif name == "frame":
        b = ((yy == 0) | (yy == s - 1) | (xx == 0) | (xx == s - 1)).astype(float)
    elif name == "dot":
        mid = (s - 1) / 2
        b = (np.sqrt((yy - mid) ** 2 + (xx - mid) ** 2) <= s / 2 - 0.4).astype(float)
    elif name == "tee":
        b = ((yy == 0) | (np.abs(xx - (s - 1) / 2) <= 0.5)).astype(float)
    else:
        raise ValueError(f"unknown stencil '{name}'")
    return b


def make_trigger(image_shape, kind="patch", stencil="square", size=4, target_class=0,
                 value=1.0, blend_ratio=0.1, seed=0):
    """Build a TriggerSpec.

    patch: a `size`x`size` stencil of intensity `value` in the bottom-right
    corner, mask binary on the stencil pixels.  blend: a full-image noise
    pattern mixed in at `blend_ratio`.
    """
    c, h, w = image_shape
    if kind == "patch":
        mask = np.zeros((h, w))
        mask[h - size : h, w - size : w] = _stencil_block(stencil, size)
        pattern = np.broadcast_to(mask * value, (c, h, w)).copy()
    elif kind == "blend":
        mask = np.full((h, w), blend_ratio)
        pattern = np_gen(seed, "blend_pattern").uniform(0, 1, size=(c, h, w))
    else:
        raise ValueError(f"unknown trigger kind '{kind}'")
    return TriggerSpec(
        kind=kind,
        mask=torch.as_tensor(mask, dtype=torch.float32),
        pattern=torch.as_tensor(pattern, dtype=torch.float32),
        target_class=int(target_class),
    )


def assign_client_triggers(num_clients, num_classes, image_shape, kind="patch", size=4,
                           seed=0, conflict=False):
    """One trigger per client: stencils round-robin, distinct target classes.

    conflict=True gives clients 0 and 1 the same stencil (different targets),
    the setup where pattern-only verification would be ambiguous.
    """
    rng = np_gen(seed, "client_triggers")
    targets = rng.permutation(num_classes)[: min(num_clients, num_classes)]
    if num_clients > num_classes:
        extra = [int(rng.integers(num_classes)) for _ in range(num_clients - num_classes)]
        targets = np.concatenate([targets, np.array(extra)])
    specs = []
    for k in range(num_clients):
        stencil = _STENCILS[0] if (conflict and k <= 1) else _STENCILS[k % len(_STENCILS)]
        specs.append(
            make_trigger(image_shape, kind=kind, stencil=stencil, size=size,
                         target_class=int(targets[k]), seed=seed * 1000 + k)
        )
    if conflict and num_clients >= 2 and specs[0].target_class == specs[1].target_class:
        specs[1].target_class = (specs[1].target_class + 1) % num_classes
    return specs


def poison_dataset(x, y, trigger, rate, seed=0):
    """Stamp and relabel floor(rate * n) samples; returns fresh tensors.

    The complement rows are value-identical to the input; returns
    (x_out, y_out, poisoned_indices).
    """
    n = len(y)
    count = int(rate * n)
    idx = np.sort(np_gen(seed, "poison", n).permutation(n)[:count])
    x_out, y_out = x.clone(), y.clone()
    if count:
        sel = torch.as_tensor(idx)
        x_out[sel] = stamp(x[sel], trigger.mask, trigger.pattern)
        y_out[sel] = trigger.target_class
    return x_out, y_out, idx


# ---------------------------------------------------------------------------
# harmless verification environments

# 3x5 digit bitmaps for tagging each environment with its client id
_DIGITS = {
    0: "111101101101111", 1: "010110010010111", 2: "111001111100111",
    3: "111001111001111", 4: "101101111001001", 5: "111100111001111",
    6: "111100111101111", 7: "111001001001001", 8: "111101111101111",
    9: "111101111001111",
}


@dataclasses.dataclass
class HarmlessEnv:
    """Per-client verification background, unrelated to the task data."""

    client_id: int
    background: torch.Tensor  # (C, H, W) in [0, 1]


def _palette(channels):
    """Distinct solid colors with pairwise max-norm distance >= 0.25."""
    if channels >= 3:
        levels = (0.0, 0.5, 1.0)
        return [(r, g, b) for r in levels for g in levels for b in levels]
    return [(v,) for v in (0.0, 0.25, 0.5, 0.75, 1.0)]


def _draw_digits(img, number, shade):
    """Stamp the decimal digits of `number` at the top-left corner."""
    at = 1
    for ch in str(number):
        bits = _DIGITS[int(ch)]
        for i, b in enumerate(bits):
            if b == "1":
                img[:, 1 + i // 3, at + i % 3] = shade
        at += 4


def build_harmless_env(num_clients, image_shape, palette_seed=0, min_distance=0.25,
                       tag_digits=True, estimates=None):
    """Assign each client a distinct solid-color background.

    Colors come from a fixed palette shuffled by `palette_seed`; raises if
    there are more clients than palette entries.  Any two backgrounds differ
    by at least `min_distance` in max-norm.

    When recovered-trigger estimates are given, each client instead gets the
    unused color its trigger shows up best against (largest stamped-minus-
    bare distance).  A recovered pattern tends to match the stroke intensity
    of the training data; on a background of that same intensity the stamp is
    invisible and nothing downstream can bind or verify it.
    """
    c, h, w = image_shape
    pal = _palette(c)
    if num_clients > len(pal):
        raise ValueError(
            f"cannot build {num_clients} distinct environments: palette for "
            f"{c}-channel images has only {len(pal)} colors"
        )
    order = list(np_gen(palette_seed, "palette").permutation(len(pal)))
    fills = []
    for color in pal:
        img = torch.empty((c, h, w), dtype=torch.float32)
        for ci in range(c):
            img[ci] = color[ci % len(color)]
        fills.append(img)
    chosen = []
    if estimates is None:
        chosen = order[:num_clients]
    else:
        free = list(order)
        for k in range(num_clients):
            est = estimates[k]
            contrast = lambda i: float((est.mask * (est.pattern - fills[i])).norm())
            pick = max(free, key=contrast)
            chosen.append(pick)
            free.remove(pick)
    envs = []
    for k in range(num_clients):
        color = pal[chosen[k]]
        img = fills[chosen[k]].clone()
        if tag_digits:
            base = float(np.mean(color))
            _draw_digits(img, k, shade=0.0 if base > 0.5 else 1.0)
        envs.append(HarmlessEnv(client_id=k, background=img))
    for a in range(len(envs)):
        for b in range(a + 1, len(envs)):
            d = float((envs[a].background - envs[b].background).abs().max())
            assert d >= min_distance, (a, b, d)
    return envs


def jitter_queries(background, n_queries, magnitude=2.0 / 255.0, seed=0):
    """n_queries copies of a background with uniform +/- magnitude noise."""
    g = np_gen(seed, "jitter")
    noise = torch.as_tensor(
        g.uniform(-magnitude, magnitude, size=(n_queries, *background.shape)),
        dtype=torch.float32,
    )
    return (background.unsqueeze(0) + noise).clamp(0.0, 1.0)
