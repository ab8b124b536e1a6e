"""Four small architectures with built-in unit masking.

Every forward takes an optional `masks` dict mapping a selection-group name
to a float vector over that group's units; masked activations are multiplied
in place in the dataflow, which is what unit ablation uses.  Constructors
accept explicit per-layer widths so the same classes serve both the full
models and the narrow extracted subnetworks.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _mul(x, masks, key, view):
    if masks is None:
        return x
    m = masks.get(key)
    if m is None:
        return x
    return x * m.view(view).to(x.dtype)


class MLP5(nn.Module):
    """Five-layer fully connected net.

    Leaky activations matter here: zeroed-out neurons keep a gradient path,
    so units pruned in one aggregation round can be re-learned in later
    rounds instead of staying dead forever.
    """

    def __init__(self, image_shape, num_classes, hidden=(64, 512, 512, 256)):
        super().__init__()
        self.hidden = tuple(hidden)
        dims = [int(math.prod(image_shape))] + list(hidden)
        for i in range(4):
            setattr(self, f"fc{i + 1}", nn.Linear(dims[i], dims[i + 1]))
        self.head = nn.Linear(dims[-1], num_classes)

    def forward(self, x, masks=None):
        x = x.flatten(1)
        for i in range(1, 5):
            x = F.leaky_relu(getattr(self, f"fc{i}")(x), 0.05)
            x = _mul(x, masks, f"fc{i}", (1, -1))
        return self.head(x)


class BasicBlock(nn.Module):
    """3x3-3x3 residual block; first block of a stage always projects."""

    def __init__(self, cin, mid, cout, stride, project):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, mid, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.project = project
        if project:
            self.proj = nn.Conv2d(cin, cout, 1, stride, bias=False)
            self.bnp = nn.BatchNorm2d(cout)

    def forward(self, x, masks, mid_key, out_key):
        h = F.relu(self.bn1(self.conv1(x)))
        h = _mul(h, masks, mid_key, (1, -1, 1, 1))
        h = self.bn2(self.conv2(h))
        s = self.bnp(self.proj(x)) if self.project else x
        out = F.relu(h + s)
        return _mul(out, masks, out_key, (1, -1, 1, 1))


class SmallResNet(nn.Module):
    """Three-stage residual net; every stage entry has a projection shortcut
    so the stem stays decoupled from the residual channel groups."""

    def __init__(self, image_shape, num_classes, stem=16,
                 stage_channels=((16, 16, 16), (32, 32, 32), (64, 64, 64)),
                 strides=(1, 2, 2)):
        super().__init__()
        self.stage_channels = tuple(tuple(s) for s in stage_channels)
        c = image_shape[0]
        self.conv0 = nn.Conv2d(c, stem, 3, 1, 1, bias=False)
        self.bn0 = nn.BatchNorm2d(stem)
        stages = []
        cin = stem
        for (m0, out, m1), st in zip(stage_channels, strides):
            stages.append(nn.ModuleList([
                BasicBlock(cin, m0, out, st, project=True),
                BasicBlock(out, m1, out, 1, project=False),
            ]))
            cin = out
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x, masks=None):
        x = F.relu(self.bn0(self.conv0(x)))
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                x = block(x, masks, f"stage{i}.block{j}.mid", f"stage{i}.out")
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class DwSepBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False)
        self.bn_dw = nn.BatchNorm2d(cin)
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn_pw = nn.BatchNorm2d(cout)

    def forward(self, x, masks, in_key, out_key):
        h = F.relu(self.bn_dw(self.dw(x)))
        h = _mul(h, masks, in_key, (1, -1, 1, 1))  # dw channels mirror the
        h = F.relu(self.bn_pw(self.pw(h)))  # previous pointwise selection
        return _mul(h, masks, out_key, (1, -1, 1, 1))


class DwSepNet(nn.Module):
    """Depthwise-separable stack in the MobileNet style."""

    def __init__(self, image_shape, num_classes, stem=16, widths=(48, 64, 96, 128),
                 strides=(2, 1, 2, 1)):
        super().__init__()
        self.widths = tuple(widths)
        c = image_shape[0]
        self.conv0 = nn.Conv2d(c, stem, 3, 1, 1, bias=False)
        self.bn0 = nn.BatchNorm2d(stem)
        blocks, cin = [], stem
        for wd, st in zip(widths, strides):
            blocks.append(DwSepBlock(cin, wd, st))
            cin = wd
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x, masks=None):
        x = F.relu(self.bn0(self.conv0(x)))
        for i, blk in enumerate(self.blocks):
            in_key = f"block{i}.pw" if i > 0 else "stem"  # stem is never masked
            x = blk(x, masks, in_key, f"block{i + 1}.pw")
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class Attention(nn.Module):
    def __init__(self, dim, heads, head_dim):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.qkv = nn.Linear(dim, 3 * heads * head_dim)
        self.proj = nn.Linear(heads * head_dim, dim)

    def forward(self, x, head_mask=None):
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (B, H, T, dh) each
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = att.softmax(-1) @ v
        if head_mask is not None:
            out = out * head_mask.view(1, -1, 1, 1).to(out.dtype)
        return self.proj(out.transpose(1, 2).reshape(b, t, -1))


class ViTBlock(nn.Module):
    def __init__(self, dim, heads, head_dim, hidden):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, head_dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, masks, idx):
        hm = None if masks is None else masks.get(f"block{idx}.heads")
        x = x + self.attn(self.ln1(x), hm)
        x = _mul(x, masks, "embed", (1, 1, -1))
        h = F.gelu(self.fc1(self.ln2(x)))
        h = _mul(h, masks, f"block{idx}.hidden", (1, 1, -1))
        x = x + self.fc2(h)
        return _mul(x, masks, "embed", (1, 1, -1))


class TinyViT(nn.Module):
    """Patch-embedding transformer; the residual width is itself a unit group."""

    def __init__(self, image_shape, num_classes, embed_dim=64, depth=2,
                 heads=(4, 4), head_dim=16, hidden=(128, 128), patch=4):
        super().__init__()
        if isinstance(heads, int):
            heads = (heads,) * depth
        if isinstance(hidden, int):
            hidden = (hidden,) * depth
        self.embed_dim, self.patch = embed_dim, patch
        self.heads, self.hidden = tuple(heads), tuple(hidden)
        self.head_dim = head_dim
        c, h, w = image_shape
        assert h % patch == 0 and w % patch == 0
        self.tokens = (h // patch) * (w // patch)
        self.patch_embed = nn.Conv2d(c, embed_dim, patch, patch)
        self.cls = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos = nn.Parameter(torch.zeros(1, self.tokens + 1, embed_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.trunc_normal_(self.cls, std=0.02)
        self.blocks = nn.ModuleList(
            ViTBlock(embed_dim, heads[i], head_dim, hidden[i]) for i in range(depth)
        )
        self.ln_f = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, num_classes)

    def forward(self, x, masks=None):
        b = x.shape[0]
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls.expand(b, -1, -1), t], dim=1) + self.pos
        t = _mul(t, masks, "embed", (1, 1, -1))
        for i, blk in enumerate(self.blocks):
            t = blk(t, masks, i)
        t = self.ln_f(t)
        return self.head(t[:, 0])
