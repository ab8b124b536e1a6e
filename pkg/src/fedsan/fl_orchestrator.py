"""FedAvg simulation with per-round server-side sanitization.

Each round: clients train locally on their (possibly poisoned) shards from
the current global weights; the server optionally sanitizes every client
update (unlearn -> rank units -> extract subnet -> advance trigger recovery
-> prune) and then aggregates by data-size-weighted averaging.

Arms:
  sanitizer          subnet extraction + round-spread recovery (the defense)
  subnet_only        recovery runs to convergence each round, but on the subnet
  spread_only        recovery spread across rounds, but on the full model
  baseline           per-round full-model recovery to convergence
  without_sanitizer  plain FedAvg, watermarks embedded
  vanilla            plain FedAvg, no watermarks
"""

import dataclasses
import time

import torch
import torch.nn.functional as F

from . import data_pipeline as dp
from . import sanitizer_core as sc
from .model_zoo import build_model
from .rng import derive_seed, torch_gen

ARMS = ("sanitizer", "subnet_only", "spread_only", "baseline",
        "without_sanitizer", "vanilla")


def arm_toggles(arm):
    """(use_subnet, use_round_spread) for a defense arm; None if no defense."""
    table = {"sanitizer": (True, True), "subnet_only": (True, False),
             "spread_only": (False, True), "baseline": (False, False)}
    return table.get(arm)


@dataclasses.dataclass
class FLConfig:
    arch: str = "mlp5"
    dataset: str = "shapes28"
    data_root: str = "data"
    num_clients: int = 4
    num_malicious: int = 2
    rounds: int = 30
    local_epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    scheme: str = "iid"
    dirichlet_alpha: float = 0.5
    defense_fraction: float = 0.05
    poison_rate: float = 0.1
    trigger_kind: str = "patch"
    trigger_size: int = 4
    conflict: bool = False
    subnet_fraction: float = 0.2
    sanitize_min_acc: float = 0.6
    prune_memory: int = 3
    vote_floor: float = 0.75  # min candidate flip to enter the round vote
    evidence_floor: float = 0.9  # min flip for an atomic evidence snapshot
    init_epochs: int = 100  # server warm-start on defense data; 0 disables
    init_lr: float = 0.05
    calib_epochs: int = 16  # reference-model trigger recovery at init
    unlearn_epochs: int = 10
    unlearn_lr: float = 0.01
    unlearn_stop: float = 0.15
    re_epochs: int = 2
    re_lr: float = 0.2
    re_lambda: float = 0.01
    re_batch: int = 128
    baseline_re_epochs: int = 8
    relearn_epochs: int = 50
    relearn_lr: float = 0.005
    relearn_batch: int = 64
    relearn_alpha: float = 0.8
    relearn_beta: float = 0.2
    relearn_shift: int = 2
    sigma: float = 0.95
    env_min_distance: float = 0.25
    jitter: float = 2.0 / 255.0
    n_queries: int = 256
    eval_samples: int = 1000
    seed: int = 0


@dataclasses.dataclass
class ClientState:
    """One simulated client: its shard (already poisoned) and its watermark."""

    client_id: int
    shard_x: torch.Tensor
    shard_y: torch.Tensor
    trigger: dp.TriggerSpec  # None when the run embeds no watermarks
    malicious: bool
    num_samples: int


@dataclasses.dataclass
class RoundReport:
    round: int
    arm: str
    acc: float
    mean_wdr: float  # benign clients' trigger flip rate (natural inputs)
    mean_asr: float  # malicious clients' trigger flip rate (natural inputs)
    server_time_s: float
    client_time_s: float
    subnet_params: int


@dataclasses.dataclass
class ServerState:
    round_idx: int
    global_params: dict
    recovery: dict  # client_id -> RecoveryState
    subnets: dict  # client_id -> (plan, narrow state_dict) from latest round
    plan_history: dict  # client_id -> recent SubnetPlans still being excluded
    reports: list
    baseline_norms: list = None  # per-class trigger norms on the clean reference
    evidence: dict = None  # client_id -> class -> atomic (subnet, candidate) record


def setup_clients(split, partition, cfg):
    """Attach shards and per-client triggers; everyone watermarks unless the
    trigger assignment is disabled (vanilla arm handled by caller)."""
    triggers = dp.assign_client_triggers(
        cfg.num_clients, split.num_classes, split.image_shape,
        kind=cfg.trigger_kind, size=cfg.trigger_size, seed=cfg.seed,
        conflict=cfg.conflict)
    clients = []
    for k in range(cfg.num_clients):
        idx = partition.client_indices[k]
        sx, sy = split.train_x[idx], split.train_y[idx]
        sx, sy, _ = dp.poison_dataset(sx, sy, triggers[k], cfg.poison_rate,
                                      seed=derive_seed(cfg.seed, "poison", k))
        malicious = k >= cfg.num_clients - cfg.num_malicious
        clients.append(ClientState(k, sx, sy, triggers[k], malicious, len(sy)))
    return clients


def setup_vanilla_clients(split, partition, cfg):
    clients = []
    for k in range(cfg.num_clients):
        idx = partition.client_indices[k]
        clients.append(ClientState(k, split.train_x[idx], split.train_y[idx],
                                   None, False, len(idx)))
    return clients


def init_server(cfg, split, defense_x=None, defense_y=None):
    """Build server state.  When defense data is given and cfg.init_epochs > 0,
    the initial global is warm-started on it: clients then begin from a
    functional model, so unlearning evidence is meaningful from round 0 and no
    un-sanitized update ever reaches the global."""
    g = build_model(cfg.arch, split.image_shape, split.num_classes, seed=cfg.seed)
    if defense_x is not None and cfg.init_epochs > 0:
        g.model.train()
        opt = torch.optim.SGD(g.parameters(), lr=cfg.init_lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        for ep in range(cfg.init_epochs):
            perm = torch.randperm(len(defense_x),
                                  generator=torch_gen(cfg.seed, "init_warm", ep))
            for i in range(0, len(perm), cfg.batch_size):
                s = perm[i : i + cfg.batch_size]
                loss = F.cross_entropy(g(defense_x[s]), defense_y[s])
                opt.zero_grad()
                loss.backward()
                opt.step()
        g.model.eval()
    baseline = None
    if defense_x is not None and cfg.init_epochs > 0 and cfg.calib_epochs > 0:
        # Per-class trigger norms recoverable from the clean reference.  Some
        # classes admit naturally small triggers (their glyph has a compact
        # discriminative stroke); scoring clients' norms relative to these
        # keeps such classes from reading as planted.
        calib = sc.RecoveryState(client_id=-1, image_shape=split.image_shape,
                                 num_classes=split.num_classes,
                                 seed=derive_seed(cfg.seed, "calibration"))
        sc.recover_trigger_step(g, calib, defense_x, epochs=cfg.calib_epochs,
                                lr=cfg.re_lr, lam=cfg.re_lambda, batch_size=cfg.re_batch)
        baseline = calib.norm_history[-1]
    recovery = {k: sc.RecoveryState(
        client_id=k, image_shape=split.image_shape, num_classes=split.num_classes,
        seed=derive_seed(cfg.seed, "recovery", k)) for k in range(cfg.num_clients)}
    return ServerState(round_idx=0,
                       global_params={k: v.clone() for k, v in g.state_dict().items()},
                       recovery=recovery, subnets={},
                       plan_history={k: [] for k in range(cfg.num_clients)},
                       reports=[], baseline_norms=baseline,
                       evidence={k: {} for k in range(cfg.num_clients)})


def train_local_backdoored(global_params, client, cfg, split_meta, round_idx):
    """One client's local update; returns its new state dict."""
    a = build_model(cfg.arch, split_meta.image_shape, split_meta.num_classes,
                    seed=cfg.seed)
    a.load_state_dict(global_params)
    a.model.train()
    opt = torch.optim.SGD(a.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    x, y = client.shard_x, client.shard_y
    for ep in range(cfg.local_epochs):
        perm = torch.randperm(len(x), generator=torch_gen(
            cfg.seed, "local", round_idx, client.client_id, ep))
        for i in range(0, len(perm), cfg.batch_size):
            s = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(a(x[s]), y[s])
            opt.zero_grad()
            loss.backward()
            opt.step()
    sd = a.state_dict()
    for key, t in sd.items():
        if t.dtype.is_floating_point and not torch.isfinite(t).all():
            raise RuntimeError(
                f"local training diverged: client {client.client_id} round "
                f"{round_idx}, non-finite values in '{key}'")
    return sd


def aggregate(state_dicts, weights, keep_masks=None):
    """Data-size-weighted average; integer buffers get the rounded mean.

    `keep_masks` (parallel to `state_dicts`, entries may be None) marks which
    float entries of each update still exist after sanitization.  A discarded
    unit is dropped from the average, not zero-averaged: each entry is the
    weighted mean over the clients that kept it.  Entries nobody kept fall
    back to the plain all-client average -- zeroing them outright amputates
    shared trunk capacity and keeps the global from ever settling.  Without
    masks this is exact weighted FedAvg.
    """
    assert len(state_dicts) == len(weights) and len(state_dicts) > 0
    total = float(sum(weights))
    assert total > 0
    if keep_masks is None:
        keep_masks = [None] * len(state_dicts)
    assert len(keep_masks) == len(state_dicts)
    out = {}
    for key, ref in state_dicts[0].items():
        if not ref.dtype.is_floating_point:
            acc = torch.zeros_like(ref, dtype=torch.float64)
            for sd, w in zip(state_dicts, weights):
                acc += sd[key].to(torch.float64) * (w / total)
            out[key] = acc.round().to(ref.dtype)
            continue
        num = torch.zeros_like(ref, dtype=torch.float64)
        den = torch.zeros_like(ref, dtype=torch.float64)
        full = torch.zeros_like(ref, dtype=torch.float64)
        for sd, keep, w in zip(state_dicts, keep_masks, weights):
            v = sd[key].to(torch.float64)
            full += v * (w / total)
            if keep is None or key not in keep:
                num += v * float(w)
                den += float(w)
            else:
                m = keep[key].to(torch.float64)
                num += v * m * float(w)
                den += m * float(w)
        out[key] = torch.where(den > 0, num / den.clamp(min=1e-12),
                               full).to(ref.dtype)
    return out


def _flip_rate(adapter, x, y, trigger, target, batch=512):
    """Fraction of non-target-class inputs steered to `target` by `trigger`."""
    keep = y != target
    if int(keep.sum()) == 0:
        return 0.0
    xs = dp.stamp(x[keep], trigger.mask, trigger.pattern)
    hits = 0
    with torch.no_grad():
        for i in range(0, len(xs), batch):
            hits += int((adapter(xs[i : i + batch]).argmax(1) == target).sum())
    return hits / len(xs)


def _accuracy(adapter, x, y, batch=512):
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            hits += int((adapter(x[i : i + batch]).argmax(1) == y[i : i + batch]).sum())
    return hits / max(1, len(y))


def _sanitize_client(a_local, server, client, defense_x, defense_y, cfg, use_subnet,
                     use_spread, round_idx):
    """Unlearn -> rank -> (subnet) -> recovery step -> prune.  Returns the
    pruned state dict, the keep-mask for aggregation, and the recovery
    substrate's parameter count."""
    k = client.client_id
    history = server.plan_history.setdefault(k, [])
    if _accuracy(a_local, defense_x, defense_y) < cfg.sanitize_min_acc:
        # Ascent from a non-functional model implicates arbitrary units.  The
        # local is usually trainable well before the round-0 average is, so
        # this gate clears within a round or two -- early enough that no
        # un-sanitized update ever seeds the global.
        keep = sc.prune_keep_mask(a_local, history) if history else None
        return a_local.state_dict(), keep, 0
    post, info = sc.clean_unlearn(
        a_local, defense_x, defense_y, epochs=cfg.unlearn_epochs,
        lr=cfg.unlearn_lr, batch_size=cfg.batch_size, stop_threshold=cfg.unlearn_stop,
        seed=derive_seed(cfg.seed, "unlearn", round_idx, k))
    if info["epochs_run"] == 0:
        # Defense accuracy was already below the stop threshold, so ascent
        # moved nothing and the change table is all zeros.  Ranking would be
        # pure index tie-break -- every client would "select" the same units.
        # No new evidence this round; keep excluding only what recent rounds
        # identified.
        keep = sc.prune_keep_mask(a_local, history) if history else None
        return a_local.state_dict(), keep, 0
    table = sc.compute_uwc(a_local, a_local.state_dict(), post)
    plan = sc.identify_subnet(a_local, table, cfg.subnet_fraction)

    if use_subnet:
        substrate = sc.extract_subnet(a_local, plan, seed=derive_seed(cfg.seed, "sub", k))
    else:
        substrate = a_local

    if use_spread:
        state = server.recovery[k]
        epochs = cfg.re_epochs
    else:  # fresh per-round optimization, run to (approximate) convergence
        state = sc.RecoveryState(client_id=k, image_shape=client.shard_x.shape[1:],
                                 num_classes=server.recovery[k].num_classes,
                                 seed=derive_seed(cfg.seed, "re_fresh", round_idx, k))
        epochs = cfg.baseline_re_epochs
    sc.recover_trigger_step(substrate, state, defense_x, epochs=epochs,
                            lr=cfg.re_lr, lam=cfg.re_lambda, batch_size=cfg.re_batch,
                            snapshot_floor=cfg.vote_floor)
    sc.vote_target(state, server.baseline_norms, flip_floor=cfg.vote_floor)
    server.recovery[k] = state

    if use_subnet:
        strong = [c for c, fl in enumerate(state.last_flips)
                  if fl >= cfg.evidence_floor]
        if k not in server.subnets or strong:
            # Snapshot the extracted subnet only while some candidate still
            # flips it: late-round extractions can lose the routing, and
            # downstream stages should see the last subnet that demonstrably
            # carried the circuit.
            server.subnets[k] = (plan, {kk: v.clone()
                                        for kk, v in substrate.state_dict().items()})
        if strong:
            # One atomic record per strong class: candidate and substrate
            # captured together, so the flip rate measured now still holds
            # whenever this pair is presented as verification evidence.
            sd = server.subnets[k][1]
            for c in strong:
                server.evidence[k][c] = {
                    "plan": plan, "subnet_sd": sd,
                    "mask_raw": state.mask_raw[c].clone(),
                    "pattern_raw": state.pattern_raw[c].clone(),
                    "flip": state.last_flips[c], "round_idx": round_idx,
                }

    # A single round's ranking is noisy; a circuit missed once would re-root
    # in the global and entrench (at few clients nothing else dilutes it).
    # Keep excluding every unit implicated in the last few rounds.  The
    # submitted update stays unpruned: the keep-mask blanks the same slices
    # during aggregation, and entries every client dropped then fall back to
    # the plain average instead of a hole.
    history.append(plan)
    del history[: -cfg.prune_memory]
    keep = sc.prune_keep_mask(a_local, history)
    return a_local.state_dict(), keep, substrate.param_count()


def run_round(server, clients, split, defense_x, defense_y, cfg, arm,
              test_x=None, test_y=None):
    """Advance the federation one round; appends and returns a RoundReport."""
    assert arm in ARMS
    r = server.round_idx
    toggles = arm_toggles(arm)

    t0 = time.perf_counter()
    local_sds = [train_local_backdoored(server.global_params, c, cfg, split, r)
                 for c in clients]
    client_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    subnet_params = 0
    keeps = None
    if toggles is not None:
        use_subnet, use_spread = toggles
        submitted, keeps, sizes = [], [], []
        for c, sd in zip(clients, local_sds):
            a = build_model(cfg.arch, split.image_shape, split.num_classes,
                            seed=cfg.seed)
            a.load_state_dict(sd)
            pruned_sd, keep, nparams = _sanitize_client(
                a, server, c, defense_x, defense_y, cfg, use_subnet, use_spread, r)
            submitted.append(pruned_sd)
            keeps.append(keep)
            if nparams:
                sizes.append(nparams)
        subnet_params = int(sum(sizes) / len(sizes)) if sizes else 0
    else:
        submitted = local_sds
    server.global_params = aggregate(submitted, [c.num_samples for c in clients],
                                     keep_masks=keeps)
    server_time = time.perf_counter() - t1

    g = build_model(cfg.arch, split.image_shape, split.num_classes, seed=cfg.seed)
    g.load_state_dict(server.global_params)
    g.model.eval()
    if test_x is None:
        test_x, test_y = split.test_x, split.test_y
    ex, ey = test_x[: cfg.eval_samples], test_y[: cfg.eval_samples]
    acc = _accuracy(g, ex, ey)
    wdrs, asrs = [], []
    for c in clients:
        if c.trigger is None:
            continue
        rate = _flip_rate(g, ex, ey, c.trigger, c.trigger.target_class)
        (asrs if c.malicious else wdrs).append(rate)
    report = RoundReport(
        round=r, arm=arm, acc=acc,
        mean_wdr=float(sum(wdrs) / len(wdrs)) if wdrs else 0.0,
        mean_asr=float(sum(asrs) / len(asrs)) if asrs else 0.0,
        server_time_s=server_time, client_time_s=client_time,
        subnet_params=subnet_params)
    server.reports.append(report)
    server.round_idx += 1
    return report


def finalize_detection(server, client_id):
    """Close out one client's trigger recovery after the last round.

    Returns the TriggerEstimate; when an atomic evidence record exists for
    the detected class, the estimate carries that record's candidate and
    server.subnets[client_id] is pinned to the matching substrate, so the
    presented trigger demonstrably flips the presented subnet.
    """
    est = sc.detect_target_class(server.recovery[client_id])
    ev = server.evidence.get(client_id, {}).get(est.target_class)
    if ev is not None:
        est = dataclasses.replace(
            est, mask=sc._squash(ev["mask_raw"]).detach(),
            pattern=sc._squash(ev["pattern_raw"]).detach())
        server.subnets[client_id] = (ev["plan"], ev["subnet_sd"])
    return est
