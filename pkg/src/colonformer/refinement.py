"""Boundary refinement: CFP feature pyramids and Residual Axial Reverse Attention."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .decoder import resize


class ConvBNAct(nn.Module):
    def __init__(self, in_ch, out_ch, kernel=3, padding=1, dilation=1, groups=1, act=True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, padding=padding, dilation=dilation, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.act = nn.PReLU(out_ch) if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class BNPReLU(nn.Sequential):
    def __init__(self, ch):
        super().__init__(nn.BatchNorm2d(ch), nn.PReLU(ch))


@dataclass(frozen=True)
class CFPConfig:
    channels: int
    dilation_rates: tuple = (1, 2, 4, 8)

    def __post_init__(self):
        rates = self.dilation_rates
        if len(rates) != 4:
            raise ValueError(f"CFP uses exactly 4 branches, got {len(rates)}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be ascending: {rates}")

    @property
    def branch_width(self):
        return max(self.channels // 4, 3)

    @property
    def sub_widths(self):
        w = self.branch_width
        a = max(w // 4, 1)
        return a, a, w - 2 * a


class CFPBranch(nn.Module):
    """Three chained dilated convs whose outputs are concatenated."""

    def __init__(self, width, subs, dilation):
        super().__init__()
        g = math.gcd(math.gcd(width, subs[0]), subs[2])
        ins = (width, subs[0], subs[1])
        self.convs = nn.ModuleList(
            ConvBNAct(i, o, 3, padding=dilation, dilation=dilation, groups=g) for i, o in zip(ins, subs)
        )

    def forward(self, x):
        outs = []
        for conv in self.convs:
            x = conv(x)
            outs.append(x)
        return torch.cat(outs, dim=1)


class CFPModule(nn.Module):
    """Channel-wise feature pyramid with progressive branch accumulation.

    Branch ``j`` is added to the running sum of branches ``< j`` before the
    four sums are concatenated, fused by a 1x1 conv and added to the input.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c, w = cfg.channels, cfg.branch_width
        self.bn_act_in = BNPReLU(c)
        self.reduce = ConvBNAct(c, w, 3, padding=1)
        self.branches = nn.ModuleList(CFPBranch(w, cfg.sub_widths, d) for d in cfg.dilation_rates)
        self.bn_act_out = BNPReLU(4 * w)
        self.fuse = nn.Conv2d(4 * w, c, 1, bias=False)

    def branch_outputs(self, x):
        if x.shape[1] != self.cfg.channels:
            raise ValueError(f"CFP expects {self.cfg.channels} channels, got {x.shape[1]}")
        y = self.reduce(self.bn_act_in(x))
        return [branch(y) for branch in self.branches]

    def forward(self, x):
        outs = self.branch_outputs(x)
        acc = [outs[0]]
        for o in outs[1:]:
            acc.append(acc[-1] + o)
        return self.fuse(self.bn_act_out(torch.cat(acc, dim=1))) + x


class AxisAttention(nn.Module):
    """Single-head self-attention restricted to one spatial axis."""

    def __init__(self, channels, axis, reduction=8, positional_bias=0):
        super().__init__()
        if axis not in ("h", "w"):
            raise ValueError(f"axis must be 'h' or 'w', got {axis!r}")
        self.axis = axis
        qk = max(channels // reduction, 1)
        self.query = nn.Conv2d(channels, qk, 1)
        self.key = nn.Conv2d(channels, qk, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.scale = qk ** -0.5
        # optional learned relative bias over axis offsets, disabled when 0
        self.rel_bias = nn.Parameter(torch.zeros(2 * positional_bias - 1)) if positional_bias else None

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.query(x), self.key(x), self.value(x)
        if self.axis == "h":
            # fold width into the batch, attend over height
            q, k, v = (t.permute(0, 3, 2, 1).reshape(b * w, h, -1) for t in (q, k, v))
        else:
            q, k, v = (t.permute(0, 2, 3, 1).reshape(b * h, w, -1) for t in (q, k, v))
        logits = (q @ k.transpose(1, 2)) * self.scale
        if self.rel_bias is not None:
            n = logits.shape[-1]
            idx = torch.arange(n, device=x.device)
            rel = (idx[None, :] - idx[:, None]).clamp(-(len(self.rel_bias) // 2), len(self.rel_bias) // 2)
            logits = logits + self.rel_bias[rel + len(self.rel_bias) // 2]
        out = logits.softmax(dim=-1) @ v
        if self.axis == "h":
            return out.reshape(b, w, h, c).permute(0, 3, 2, 1)
        return out.reshape(b, h, w, c).permute(0, 3, 1, 2)


class ResidualAxialAttention(nn.Module):
    """``f + proj(attn_w(attn_h(pre(f))))``; zeroing ``out_proj`` yields the identity."""

    def __init__(self, channels, positional_bias=0):
        super().__init__()
        self.pre = nn.Sequential(ConvBNAct(channels, channels, 1, padding=0), ConvBNAct(channels, channels, 3))
        self.attn_h = AxisAttention(channels, "h", positional_bias=positional_bias)
        self.attn_w = AxisAttention(channels, "w", positional_bias=positional_bias)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def axial(self, f):
        return self.out_proj(self.attn_w(self.attn_h(self.pre(f))))

    def forward(self, f):
        if f.dim() != 4:
            raise ValueError(f"expected a 4-D feature map, got {f.dim()}-D")
        return f + self.axial(f)


class ReverseAttentionBlock(nn.Module):
    """Erase the prior's confident foreground from side features and predict a residual.

    A saturated prior (sigmoid 1) erases everything and is returned unchanged.

    With ``use_axial=False`` the features are masked directly (plain reverse
    attention); otherwise they pass through residual axial attention first.
    """

    def __init__(self, channels, head_width=32, use_axial=True, positional_bias=0):
        super().__init__()
        self.attention = ResidualAxialAttention(channels, positional_bias) if use_axial else None
        # bias- and norm-free so that a fully erased input gives a zero residual
        self.head = nn.Sequential(
            nn.Conv2d(channels, head_width, 3, padding=1, bias=False),
            nn.PReLU(head_width),
            nn.Conv2d(head_width, head_width, 3, padding=1, bias=False),
            nn.PReLU(head_width),
            nn.Conv2d(head_width, 1, 3, padding=1, bias=False),
        )

    def forward(self, feat, prior):
        if feat.dim() != 4 or prior.shape[1] != 1:
            raise ValueError(f"expected (B,C,H,W) features and a 1-channel prior, got {tuple(feat.shape)}, {tuple(prior.shape)}")
        prior = resize(prior, feat.shape[-2:])
        reverse = 1 - torch.sigmoid(prior)
        side = self.attention(feat) if self.attention is not None else feat
        return self.head(reverse * side) + prior


class RefinementModule(nn.Module):
    """Three RA-RA stages on encoder stages 4, 3, 2, deepest first.

    Returns ``[global, refine@1/32, refine@1/16, refine@1/8]``.
    """

    def __init__(self, stage_channels, head_width=32, dilation_rates=(1, 2, 4, 8), use_axial=True, positional_bias=0):
        super().__init__()
        self.stage_channels = tuple(stage_channels)
        deep_first = self.stage_channels[::-1]
        self.cfps = nn.ModuleList(CFPModule(CFPConfig(c, tuple(dilation_rates))) for c in deep_first)
        self.blocks = nn.ModuleList(
            ReverseAttentionBlock(c, head_width, use_axial, positional_bias) for c in deep_first
        )

    def forward(self, feats, global_map):
        """``feats`` is the full four-level pyramid."""
        taps = feats[1:][::-1]
        maps = [global_map]
        prior = global_map
        for feat, cfp, block in zip(taps, self.cfps, self.blocks):
            prior = block(cfp(feat), prior)
            maps.append(prior)
        return maps
