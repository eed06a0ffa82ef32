"""Mix-Transformer (MiT) hierarchical encoder."""

import math
from dataclasses import dataclass

import torch.nn as nn


@dataclass(frozen=True)
class PatchEmbedConfig:
    kernel: int
    stride: int
    padding: int
    out_channels: int

    def __post_init__(self):
        if self.stride >= self.kernel:
            raise ValueError("overlapping patch embedding needs stride < kernel")


@dataclass(frozen=True)
class BackboneVariant:
    name: str
    depths: tuple
    channels: tuple
    heads: tuple
    sr_ratios: tuple = (8, 4, 2, 1)
    mlp_ratio: int = 4

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"stage channels must be strictly ascending: {self.channels}")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"embed dim {c} not divisible by {h} heads")


_MIT_CHANNELS = (64, 128, 320, 512)
_MIT_HEADS = (1, 2, 5, 8)

VARIANTS = {
    "B1": BackboneVariant("B1", (2, 2, 2, 2), _MIT_CHANNELS, _MIT_HEADS),
    "B2": BackboneVariant("B2", (3, 4, 6, 3), _MIT_CHANNELS, _MIT_HEADS),
    "B3": BackboneVariant("B3", (3, 4, 18, 3), _MIT_CHANNELS, _MIT_HEADS),
    "B4": BackboneVariant("B4", (3, 8, 27, 3), _MIT_CHANNELS, _MIT_HEADS),
    "B5": BackboneVariant("B5", (3, 6, 40, 3), _MIT_CHANNELS, _MIT_HEADS),
    # desk-scale variants for smoke training and gradient checks
    "T": BackboneVariant("T", (1, 1, 1, 1), (16, 32, 48, 64), (1, 2, 2, 4)),
    "G": BackboneVariant("G", (1, 1, 1, 1), (4, 8, 12, 16), (1, 1, 2, 2)),
}


def conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class OverlapPatchEmbed(nn.Module):
    """Strided convolution with stride < kernel, then LayerNorm over channels."""

    def __init__(self, in_channels, cfg):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(in_channels, cfg.out_channels, cfg.kernel, cfg.stride, cfg.padding)
        self.norm = nn.LayerNorm(cfg.out_channels)

    def forward(self, x):
        k, p = self.cfg.kernel, self.cfg.padding
        if min(x.shape[-2:]) + 2 * p < k:
            raise ValueError(f"input {tuple(x.shape[-2:])} smaller than kernel {k} (padding {p})")
        x = self.proj(x)
        h, w = x.shape[-2:]
        x = self.norm(x.flatten(2).transpose(1, 2))
        return x, (h, w)


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with keys/values spatially reduced by ``sr_ratio``.

    The key/value grid is shrunk by a strided ``sr_ratio x sr_ratio`` convolution,
    so the key count drops by ``sr_ratio ** 2``.
    """

    def __init__(self, dim, num_heads=1, sr_ratio=1, qkv_bias=True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        if sr_ratio < 1:
            raise ValueError("sr_ratio must be >= 1")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.sr_ratio = sr_ratio
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, dim * 2, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def reduce(self, x, hw):
        if self.sr_ratio == 1:
            return x
        b, n, c = x.shape
        h, w = hw
        if min(h, w) < self.sr_ratio:
            raise ValueError(f"grid {h}x{w} smaller than reduction ratio {self.sr_ratio}")
        x = x.transpose(1, 2).reshape(b, c, h, w)
        return self.norm(self.sr(x).flatten(2).transpose(1, 2))

    def forward(self, x, hw, return_attention=False):
        b, n, c = x.shape
        if n != hw[0] * hw[1]:
            raise ValueError(f"token count {n} != {hw[0]}x{hw[1]}")
        heads = self.num_heads
        q = self.q(x).reshape(b, n, heads, c // heads).transpose(1, 2)
        kv = self.kv(self.reduce(x, hw)).reshape(b, -1, 2, heads, c // heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))
        return (out, attn) if return_attention else out


class MixFFN(nn.Module):
    """Linear expand, 3x3 depth-wise conv, GELU, linear project."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, hw):
        b, n, _ = x.shape
        h, w = hw
        if n != h * w:
            raise ValueError(f"cannot reshape {n} tokens to {h}x{w}")
        x = self.fc1(x)
        x = self.dwconv(x.transpose(1, 2).reshape(b, -1, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))


class MiTBlock(nn.Module):
    def __init__(self, dim, num_heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x), hw)
        return x + self.mlp(self.norm2(x), hw)


class MiTEncoder(nn.Module):
    """Four-stage encoder returning features at 1/4, 1/8, 1/16 and 1/32 resolution."""

    def __init__(self, variant, in_channels=3):
        super().__init__()
        self.variant = variant
        ch = variant.channels
        embeds, stages, norms = [], [], []
        for i in range(4):
            cfg = PatchEmbedConfig(7, 4, 3, ch[0]) if i == 0 else PatchEmbedConfig(3, 2, 1, ch[i])
            embeds.append(OverlapPatchEmbed(in_channels if i == 0 else ch[i - 1], cfg))
            stages.append(nn.ModuleList(
                MiTBlock(ch[i], variant.heads[i], variant.sr_ratios[i], variant.mlp_ratio)
                for _ in range(variant.depths[i])
            ))
            norms.append(nn.LayerNorm(ch[i]))
        self.patch_embeds = nn.ModuleList(embeds)
        self.stages = nn.ModuleList(stages)
        self.norms = nn.ModuleList(norms)
        self.apply(init_weights)

    @property
    def channels(self):
        return self.variant.channels

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        feats = []
        for embed, blocks, norm in zip(self.patch_embeds, self.stages, self.norms):
            x, hw = embed(x)
            for blk in blocks:
                x = blk(x, hw)
            x = norm(x)
            x = x.transpose(1, 2).reshape(x.shape[0], -1, *hw)
            feats.append(x)
        return feats


def init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)
