"""Architecture-neutral view of models as collections of prunable units.

A unit is the smallest removable computation: an FC neuron (its incoming
weight row), a conv output channel (its (Cin, kh, kw) kernel block), or an
attention head (its Q/K/V rows plus projection columns).  Each architecture
registers:

  * LayerViews   - ordered introspection records, one per parameterized layer
  * groups       - selection groups: units that must be kept/dropped together
                   (a conv with its BN, residual partners, the transformer
                   residual width)
  * axis rules   - for every state-dict entry, which group governs each axis;
                   this is what drives narrow-model weight extraction

Weight-magnitude statistics deliberately cover weight matrices/kernels only;
biases and normalization affine terms are excluded.
"""

import copy
import dataclasses
import math

import numpy as np
import torch

from ..rng import derive_seed
from . import nets


@dataclasses.dataclass(frozen=True)
class WeightSlice:
    """Per-unit index sets along one axis of one state-dict entry.

    unit_indices=None means unit i owns index i (the common case); otherwise
    unit_indices[i] lists the indices owned by unit i (e.g. the dh rows of a
    head inside a fused QKV matrix).
    """

    param: str
    axis: int
    unit_indices: tuple = None

    def indices(self, units):
        if self.unit_indices is None:
            return list(units)
        out = []
        for u in units:
            out.extend(self.unit_indices[u])
        return out


@dataclasses.dataclass(frozen=True)
class LayerView:
    name: str
    kind: str  # fc | conv | bn | attention | other
    unit_granularity: str  # neuron | channel | head | none
    unit_count: int
    coupled_layers: tuple
    selectable: bool
    uwc_slices: tuple  # WeightSlice tuple defining each unit's weight footprint
    params: tuple  # owned state-dict keys


@dataclasses.dataclass(frozen=True)
class SelectionGroup:
    """Units selected as one: ranked layers vote via summed statistics,
    prune_slices are what gets zeroed for a dropped unit."""

    name: str
    unit_count: int
    ranked_layers: tuple
    prune_slices: tuple


@dataclasses.dataclass(frozen=True)
class AxisRule:
    group: str
    expand: object = None  # callable: selected units -> source indices


@dataclasses.dataclass
class SubnetPlan:
    """Which units of which layers survive extraction/pruning."""

    arch_id: str
    fraction: float
    selection: dict  # layer name -> sorted list of selected unit indices

    def __post_init__(self):
        for name, sel in self.selection.items():
            assert list(sel) == sorted(set(int(i) for i in sel)), name


def selection_size(fraction, unit_count):
    """Units kept per layer at a given fraction (never zero)."""
    return max(1, math.ceil(fraction * unit_count))


# ---------------------------------------------------------------------------
# architecture metadata


class _Meta:
    def __init__(self, layers, groups, axis_rules, narrow_kwargs):
        self.layers = layers  # list[LayerView]
        self.groups = {g.name: g for g in groups}
        self.axis_rules = axis_rules  # param -> dict[axis, AxisRule]
        self.narrow_kwargs = narrow_kwargs  # callable(plan) -> ctor kwargs
        self.by_name = {lv.name: lv for lv in layers}


def _rows(param):
    return WeightSlice(param, 0)


def _mlp5_meta(model, image_shape, num_classes):
    layers, groups, rules = [], [], {}
    hidden = model.hidden
    names = [f"fc{i}" for i in range(1, 5)]
    for i, nm in enumerate(names):
        layers.append(LayerView(
            name=nm, kind="fc", unit_granularity="neuron", unit_count=hidden[i],
            coupled_layers=(), selectable=True,
            uwc_slices=(_rows(f"{nm}.weight"),),
            params=(f"{nm}.weight", f"{nm}.bias"),
        ))
        groups.append(SelectionGroup(
            name=nm, unit_count=hidden[i], ranked_layers=(nm,),
            prune_slices=(_rows(f"{nm}.weight"), _rows(f"{nm}.bias")),
        ))
        prev = names[i - 1] if i > 0 else None
        rules[f"{nm}.weight"] = {0: AxisRule(nm), **({1: AxisRule(prev)} if prev else {})}
        rules[f"{nm}.bias"] = {0: AxisRule(nm)}
    layers.append(LayerView(
        name="head", kind="fc", unit_granularity="neuron", unit_count=num_classes,
        coupled_layers=(), selectable=False,
        uwc_slices=(_rows("head.weight"),),
        params=("head.weight", "head.bias"),
    ))
    rules["head.weight"] = {1: AxisRule("fc4")}
    rules["head.bias"] = {}

    def narrow_kwargs(plan):
        return {"hidden": tuple(len(plan.selection[nm]) for nm in names)}

    return _Meta(layers, groups, rules, narrow_kwargs)


def _bn_layer(name, count, conv):
    return LayerView(
        name=name, kind="bn", unit_granularity="channel", unit_count=count,
        coupled_layers=(conv,), selectable=False, uwc_slices=(),
        params=(f"{name}.weight", f"{name}.bias", f"{name}.running_mean",
                f"{name}.running_var", f"{name}.num_batches_tracked"),
    )


def _bn_rules(rules, name, group):
    for suffix in ("weight", "bias", "running_mean", "running_var"):
        rules[f"{name}.{suffix}"] = {0: AxisRule(group)} if group else {}
    rules[f"{name}.num_batches_tracked"] = {}


def _bn_prune(name):
    return (_rows(f"{name}.weight"), _rows(f"{name}.bias"))


def _smallresnet_meta(model, image_shape, num_classes):
    layers, groups, rules = [], [], {}
    stem = model.conv0.out_channels
    layers.append(LayerView("conv0", "conv", "channel", stem, ("bn0",), False,
                            (_rows("conv0.weight"),), ("conv0.weight",)))
    layers.append(_bn_layer("bn0", stem, "conv0"))
    rules["conv0.weight"] = {}
    _bn_rules(rules, "bn0", None)

    prev_out = None  # selection group feeding the current stage
    for i, (m0, out, m1) in enumerate(model.stage_channels):
        out_group = f"stage{i}.out"
        out_members = []
        for j, mid in enumerate((m0, m1)):
            p = f"stages.{i}.{j}"
            mid_group = f"stage{i}.block{j}.mid"
            in_group = prev_out if j == 0 else out_group
            layers.append(LayerView(
                f"{p}.conv1", "conv", "channel", mid, (f"{p}.bn1",), True,
                (_rows(f"{p}.conv1.weight"),), (f"{p}.conv1.weight",)))
            layers.append(_bn_layer(f"{p}.bn1", mid, f"{p}.conv1"))
            groups.append(SelectionGroup(
                mid_group, mid, (f"{p}.conv1",),
                (_rows(f"{p}.conv1.weight"),) + _bn_prune(f"{p}.bn1")))
            rules[f"{p}.conv1.weight"] = {0: AxisRule(mid_group),
                                          **({1: AxisRule(in_group)} if in_group else {})}
            _bn_rules(rules, f"{p}.bn1", mid_group)

            partners = tuple(x for x in (f"stages.{i}.0.conv2", f"stages.{i}.0.proj",
                                         f"stages.{i}.1.conv2")
                             if x != f"{p}.conv2")
            layers.append(LayerView(
                f"{p}.conv2", "conv", "channel", out,
                (f"{p}.bn2",) + partners, True,
                (_rows(f"{p}.conv2.weight"),), (f"{p}.conv2.weight",)))
            layers.append(_bn_layer(f"{p}.bn2", out, f"{p}.conv2"))
            rules[f"{p}.conv2.weight"] = {0: AxisRule(out_group), 1: AxisRule(mid_group)}
            _bn_rules(rules, f"{p}.bn2", out_group)
            out_members.append(f"{p}.conv2")

        p = f"stages.{i}.0"
        layers.append(LayerView(
            f"{p}.proj", "conv", "channel", out,
            (f"{p}.bnp", f"stages.{i}.0.conv2", f"stages.{i}.1.conv2"), True,
            (_rows(f"{p}.proj.weight"),), (f"{p}.proj.weight",)))
        layers.append(_bn_layer(f"{p}.bnp", out, f"{p}.proj"))
        rules[f"{p}.proj.weight"] = {0: AxisRule(out_group),
                                     **({1: AxisRule(prev_out)} if prev_out else {})}
        _bn_rules(rules, f"{p}.bnp", out_group)
        out_members.insert(1, f"{p}.proj")

        groups.append(SelectionGroup(
            out_group, out, tuple(out_members),
            tuple(_rows(f"{m}.weight") for m in out_members)
            + _bn_prune(f"stages.{i}.0.bn2") + _bn_prune(f"{p}.bnp")
            + _bn_prune(f"stages.{i}.1.bn2")))
        prev_out = out_group

    layers.append(LayerView("fc", "fc", "neuron", num_classes, (), False,
                            (_rows("fc.weight"),), ("fc.weight", "fc.bias")))
    rules["fc.weight"] = {1: AxisRule(prev_out)}
    rules["fc.bias"] = {}

    def narrow_kwargs(plan):
        chans = []
        for i in range(len(model.stage_channels)):
            chans.append((len(plan.selection[f"stages.{i}.0.conv1"]),
                          len(plan.selection[f"stages.{i}.0.conv2"]),
                          len(plan.selection[f"stages.{i}.1.conv1"])))
        return {"stage_channels": tuple(chans)}

    return _Meta(layers, groups, rules, narrow_kwargs)


def _dwsepnet_meta(model, image_shape, num_classes):
    layers, groups, rules = [], [], {}
    stem = model.conv0.out_channels
    layers.append(LayerView("conv0", "conv", "channel", stem, ("bn0",), False,
                            (_rows("conv0.weight"),), ("conv0.weight",)))
    layers.append(_bn_layer("bn0", stem, "conv0"))
    rules["conv0.weight"] = {}
    _bn_rules(rules, "bn0", None)

    widths = model.widths
    n = len(widths)
    for i in range(n):
        p = f"blocks.{i}"
        cin = stem if i == 0 else widths[i - 1]
        in_group = None if i == 0 else f"block{i}.pw"
        layers.append(LayerView(
            f"{p}.dw", "conv", "channel", cin,
            (f"{p}.bn_dw",) + ((f"blocks.{i - 1}.pw",) if i > 0 else ()), False,
            (_rows(f"{p}.dw.weight"),), (f"{p}.dw.weight",)))
        layers.append(_bn_layer(f"{p}.bn_dw", cin, f"{p}.dw"))
        rules[f"{p}.dw.weight"] = {0: AxisRule(in_group)} if in_group else {}
        _bn_rules(rules, f"{p}.bn_dw", in_group)

        out_group = f"block{i + 1}.pw"
        layers.append(LayerView(
            f"{p}.pw", "conv", "channel", widths[i],
            (f"{p}.bn_pw",) + ((f"blocks.{i + 1}.dw",) if i + 1 < n else ()), True,
            (_rows(f"{p}.pw.weight"),), (f"{p}.pw.weight",)))
        layers.append(_bn_layer(f"{p}.bn_pw", widths[i], f"{p}.pw"))
        rules[f"{p}.pw.weight"] = {0: AxisRule(out_group),
                                   **({1: AxisRule(in_group)} if in_group else {})}
        _bn_rules(rules, f"{p}.bn_pw", out_group)

        ranked = (f"{p}.pw",) + ((f"blocks.{i + 1}.dw",) if i + 1 < n else ())
        prune = (_rows(f"{p}.pw.weight"),) + _bn_prune(f"{p}.bn_pw")
        if i + 1 < n:
            prune += (_rows(f"blocks.{i + 1}.dw.weight"),) + _bn_prune(f"blocks.{i + 1}.bn_dw")
        groups.append(SelectionGroup(out_group, widths[i], ranked, prune))

    layers.append(LayerView("fc", "fc", "neuron", num_classes, (), False,
                            (_rows("fc.weight"),), ("fc.weight", "fc.bias")))
    rules["fc.weight"] = {1: AxisRule(f"block{n}.pw")}
    rules["fc.bias"] = {}

    def narrow_kwargs(plan):
        return {"widths": tuple(len(plan.selection[f"blocks.{i}.pw"]) for i in range(n))}

    return _Meta(layers, groups, rules, narrow_kwargs)


def _tinyvit_meta(model, image_shape, num_classes):
    layers, groups, rules = [], [], {}
    dim, dh = model.embed_dim, model.head_dim
    depth = len(model.blocks)

    # the residual width: ranked by everything that writes into a channel
    writer = [_rows("patch_embed.weight")]
    embed_prune = [_rows("patch_embed.weight"), _rows("patch_embed.bias"),
                   WeightSlice("cls", 2), WeightSlice("pos", 2)]
    ln_names = []
    for i in range(depth):
        writer += [_rows(f"blocks.{i}.attn.proj.weight"), _rows(f"blocks.{i}.fc2.weight")]
        embed_prune += [_rows(f"blocks.{i}.attn.proj.weight"),
                        _rows(f"blocks.{i}.attn.proj.bias"),
                        _rows(f"blocks.{i}.fc2.weight"), _rows(f"blocks.{i}.fc2.bias")]
        ln_names += [f"blocks.{i}.ln1", f"blocks.{i}.ln2"]
    ln_names.append("ln_f")
    for ln in ln_names:
        embed_prune += [_rows(f"{ln}.weight"), _rows(f"{ln}.bias")]

    layers.append(LayerView(
        "patch_embed", "conv", "channel", dim,
        tuple(ln_names) + ("embed_tokens",), True,
        tuple(writer), ("patch_embed.weight", "patch_embed.bias")))
    groups.append(SelectionGroup("embed", dim, ("patch_embed",), tuple(embed_prune)))
    rules["patch_embed.weight"] = {0: AxisRule("embed")}
    rules["patch_embed.bias"] = {0: AxisRule("embed")}

    layers.append(LayerView("embed_tokens", "other", "none", 0, ("patch_embed",),
                            False, (), ("cls", "pos")))
    rules["cls"] = {2: AxisRule("embed")}
    rules["pos"] = {2: AxisRule("embed")}

    for ln in ln_names:
        layers.append(LayerView(ln, "other", "none", 0, ("patch_embed",), False, (),
                                (f"{ln}.weight", f"{ln}.bias")))
        rules[f"{ln}.weight"] = {0: AxisRule("embed")}
        rules[f"{ln}.bias"] = {0: AxisRule("embed")}

    for i in range(depth):
        p = f"blocks.{i}"
        heads = model.heads[i]
        qkv_rows = tuple(
            tuple(b * heads * dh + h * dh + j for b in range(3) for j in range(dh))
            for h in range(heads))
        proj_cols = tuple(tuple(h * dh + j for j in range(dh)) for h in range(heads))
        hg = f"block{i}.heads"
        layers.append(LayerView(
            f"{p}.attn", "attention", "head", heads, (), True,
            (WeightSlice(f"{p}.attn.qkv.weight", 0, qkv_rows),
             WeightSlice(f"{p}.attn.proj.weight", 1, proj_cols)),
            (f"{p}.attn.qkv.weight", f"{p}.attn.qkv.bias",
             f"{p}.attn.proj.weight", f"{p}.attn.proj.bias")))
        groups.append(SelectionGroup(
            hg, heads, (f"{p}.attn",),
            (WeightSlice(f"{p}.attn.qkv.weight", 0, qkv_rows),
             WeightSlice(f"{p}.attn.qkv.bias", 0, qkv_rows),
             WeightSlice(f"{p}.attn.proj.weight", 1, proj_cols))))

        def _qkv_expand(sel, H=heads):
            return [b * H * dh + h * dh + j for b in range(3) for h in sel
                    for j in range(dh)]

        def _col_expand(sel):
            return [h * dh + j for h in sel for j in range(dh)]

        rules[f"{p}.attn.qkv.weight"] = {0: AxisRule(hg, _qkv_expand), 1: AxisRule("embed")}
        rules[f"{p}.attn.qkv.bias"] = {0: AxisRule(hg, _qkv_expand)}
        rules[f"{p}.attn.proj.weight"] = {0: AxisRule("embed"), 1: AxisRule(hg, _col_expand)}
        rules[f"{p}.attn.proj.bias"] = {0: AxisRule("embed")}

        hidg = f"block{i}.hidden"
        layers.append(LayerView(
            f"{p}.fc1", "fc", "neuron", model.hidden[i], (f"{p}.fc2",), True,
            (_rows(f"{p}.fc1.weight"),), (f"{p}.fc1.weight", f"{p}.fc1.bias")))
        layers.append(LayerView(
            f"{p}.fc2", "fc", "neuron", dim, (f"{p}.fc1",), False,
            (_rows(f"{p}.fc2.weight"),), (f"{p}.fc2.weight", f"{p}.fc2.bias")))
        groups.append(SelectionGroup(
            hidg, model.hidden[i], (f"{p}.fc1",),
            (_rows(f"{p}.fc1.weight"), _rows(f"{p}.fc1.bias"))))
        rules[f"{p}.fc1.weight"] = {0: AxisRule(hidg), 1: AxisRule("embed")}
        rules[f"{p}.fc1.bias"] = {0: AxisRule(hidg)}
        rules[f"{p}.fc2.weight"] = {0: AxisRule("embed"), 1: AxisRule(hidg)}
        rules[f"{p}.fc2.bias"] = {0: AxisRule("embed")}

    layers.append(LayerView("head", "fc", "neuron", num_classes, (), False,
                            (_rows("head.weight"),), ("head.weight", "head.bias")))
    rules["head.weight"] = {1: AxisRule("embed")}
    rules["head.bias"] = {}

    def narrow_kwargs(plan):
        return {
            "embed_dim": len(plan.selection["patch_embed"]),
            "heads": tuple(len(plan.selection[f"blocks.{i}.attn"]) for i in range(depth)),
            "hidden": tuple(len(plan.selection[f"blocks.{i}.fc1"]) for i in range(depth)),
            "head_dim": dh,
            "depth": depth,
            "patch": model.patch,
        }

    return _Meta(layers, groups, rules, narrow_kwargs)


_ARCHS = {
    "mlp5": (nets.MLP5, _mlp5_meta),
    "smallresnet": (nets.SmallResNet, _smallresnet_meta),
    "dwsepnet": (nets.DwSepNet, _dwsepnet_meta),
    "tinyvit": (nets.TinyViT, _tinyvit_meta),
}


# ---------------------------------------------------------------------------
# the adapter


class ModelAdapter:
    """A model plus its unit-structure metadata and optional ablation masks."""

    def __init__(self, arch_id, model, image_shape, num_classes):
        self.arch_id = arch_id
        self.model = model
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        _, meta_fn = _ARCHS[arch_id]
        self._meta = meta_fn(model, image_shape, num_classes)
        self.masks = None
        owned = [p for lv in self.layers for p in lv.params]
        present = [n for n, _ in model.named_parameters()]
        present += [n for n, _ in model.named_buffers()]
        assert sorted(owned) == sorted(present), f"{arch_id}: layer/param map mismatch"

    @property
    def layers(self):
        return self._meta.layers

    @property
    def groups(self):
        return self._meta.groups

    def layer(self, name):
        return self._meta.by_name[name]

    def axis_rules(self, param):
        return self._meta.axis_rules[param]

    def forward(self, x):
        return self.model(x, masks=self.masks)

    __call__ = forward

    def state_dict(self):
        return self.model.state_dict()

    def load_state_dict(self, sd):
        self.model.load_state_dict(sd)

    def parameters(self):
        return self.model.parameters()

    def param_count(self):
        return sum(p.numel() for p in self.model.parameters())

    def clone(self):
        other = ModelAdapter(self.arch_id, copy.deepcopy(self.model),
                             self.image_shape, self.num_classes)
        if self.masks is not None:
            other.masks = {k: v.clone() for k, v in self.masks.items()}
        return other

    def group_selection(self, plan):
        """Resolve a layer-keyed plan into {group name: selected units}."""
        out = {}
        for g in self.groups.values():
            sels = [plan.selection[ln] for ln in g.ranked_layers
                    if ln in plan.selection]
            if not sels:
                continue
            for s in sels[1:]:
                assert list(s) == list(sels[0]), f"{g.name}: partners disagree"
            out[g.name] = list(sels[0])
        return out


def build_model(arch_id, image_shape, num_classes, seed=0, **kwargs):
    """Construct a registered architecture with deterministic initialization."""
    if arch_id not in _ARCHS:
        raise ValueError(f"unknown arch '{arch_id}'")
    ctor, _ = _ARCHS[arch_id]
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "init", arch_id))
        model = ctor(image_shape, num_classes, **kwargs)
    return ModelAdapter(arch_id, model, image_shape, num_classes)


def ablate_units(adapter, plan, mode="remove"):
    """Return a copy whose forward zeroes the planned units (or everything
    but them, with mode="keep_only").  The input adapter is untouched."""
    assert mode in ("remove", "keep_only")
    out = adapter.clone()
    masks = {}
    for gname, sel in adapter.group_selection(plan).items():
        g = adapter.groups[gname]
        m = torch.zeros(g.unit_count) if mode == "keep_only" else torch.ones(g.unit_count)
        val = 1.0 if mode == "keep_only" else 0.0
        if len(sel):
            m[torch.as_tensor(sel, dtype=torch.int64)] = val
        masks[gname] = m
    out.masks = masks
    return out


def construct_narrow(adapter, plan, seed=0):
    """Fresh (initialized, not yet copied) model shaped to the plan."""
    kwargs = adapter._meta.narrow_kwargs(plan)
    return build_model(adapter.arch_id, adapter.image_shape, adapter.num_classes,
                      seed=seed, **kwargs)


def copy_selected_weights(adapter, narrow, plan):
    """Fill `narrow` with the planned slices of `adapter`'s weights.

    Every axis governed by a selection group keeps only the selected indices
    (in order); ungoverned axes are copied whole.  BN running statistics
    travel with their channels.
    """
    sel = adapter.group_selection(plan)
    src_sd = adapter.state_dict()
    dst_sd = narrow.state_dict()
    new = {}
    for key, dst in dst_sd.items():
        t = src_sd[key]
        for axis, rule in sorted(adapter.axis_rules(key).items()):
            idx = rule.expand(sel[rule.group]) if rule.expand else sel[rule.group]
            t = t.index_select(axis, torch.as_tensor(idx, dtype=torch.int64))
        assert t.shape == dst.shape, (key, tuple(t.shape), tuple(dst.shape))
        new[key] = t.clone()
    narrow.load_state_dict(new)
    return narrow
