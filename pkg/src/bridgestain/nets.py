"""Denoiser networks and oracle stand-ins.

Tensors inside the networks are NCHW. A denoiser is anything callable as
``denoiser(x_t, y, t) -> eps_hat`` on NCHW tensors, where ``t`` is an int or
a length-B integer tensor.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfigError, InvalidInputError
from . import rng as rngs


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_width: int = 32
    attention_heads: int = 4
    time_embed_dim: int = 64
    in_channels: int = 6
    out_channels: int = 3
    # None means every level, as drawn in the reference architecture
    attention_levels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidConfigError("levels must be >= 1")
        if min(self.base_width, self.attention_heads, self.time_embed_dim, self.in_channels, self.out_channels) < 1:
            raise InvalidConfigError("widths and dims must be positive")
        if self.time_embed_dim % 2:
            raise InvalidConfigError("time_embed_dim must be even")
        if self.attention_levels is not None:
            object.__setattr__(self, "attention_levels", tuple(int(i) for i in self.attention_levels))

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.levels)]

    def has_attention(self, level: int) -> bool:
        return self.attention_levels is None or level in self.attention_levels

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["attention_levels"] is not None:
            d["attention_levels"] = list(d["attention_levels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        if d.get("attention_levels") is not None:
            d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


def sinusoidal_code(t, dim: int) -> torch.Tensor:
    """Raw sinusoidal code ``[sin(t w_k), cos(t w_k)]`` with ``w_k`` geometric
    from 1 down to 1/10000."""
    if dim % 2:
        raise InvalidConfigError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def timestep_embedding(t, dim: int, linear: nn.Linear | None = None) -> torch.Tensor:
    """Sinusoidal code, SiLU, then the learned linear map when one is given."""
    h = F.silu(sinusoidal_code(t, dim))
    if linear is None:
        return h
    return linear(h.to(linear.weight.dtype))


def _groups(ch: int, cap: int = 8) -> int:
    return max(g for g in range(1, min(cap, ch) + 1) if ch % g == 0)


class ResBlock(nn.Module):
    """GN-SiLU-conv3x3 twice, time code added to the block input."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.temb = nn.Linear(temb_dim, in_ch)
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, code):
        x = x + self.temb(code)[:, :, None, None]
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        if ch % heads:
            heads = math.gcd(ch, heads)
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        out = F.scaled_dot_product_attention(q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2))
        out = out.transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    """eps_theta(concat(x_t, y), t)."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        td = config.time_embed_dim
        self.conv_in = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.down_res.append(ResBlock(ch, w, td))
            self.down_attn.append(AttentionBlock(w, config.attention_heads) if config.has_attention(i) else nn.Identity())
            ch = w

        self.mid_res1 = ResBlock(ch, ch, td)
        self.mid_attn = AttentionBlock(ch, config.attention_heads)
        self.mid_res2 = ResBlock(ch, ch, td)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(config.levels)):
            w = widths[i]
            self.up_res.append(ResBlock(ch + w, w, td))
            self.up_attn.append(AttentionBlock(w, config.attention_heads) if config.has_attention(i) else nn.Identity())
            ch = w

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def forward(self, x_t, y, t):
        levels = self.config.levels
        h, w = x_t.shape[-2:]
        if h % 2 ** (levels - 1) or w % 2 ** (levels - 1):
            raise InvalidInputError(f"spatial size {h}x{w} not divisible by 2^{levels - 1}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x_t.shape[0] != 1:
            t = t.expand(x_t.shape[0])
        code = F.silu(sinusoidal_code(t, self.config.time_embed_dim)).to(x_t.dtype)

        x = self.conv_in(torch.cat([x_t, y], dim=1))
        skips = []
        for i in range(levels):
            x = self.down_attn[i](self.down_res[i](x, code))
            skips.append(x)
            if i < levels - 1:
                x = F.avg_pool2d(x, 2)

        x = self.mid_res2(self.mid_attn(self.mid_res1(x, code)), code)

        for j in range(levels):
            i = levels - 1 - j
            x = torch.cat([x, skips[i]], dim=1)
            x = self.up_attn[j](self.up_res[j](x, code))
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")

        return self.conv_out(F.silu(self.norm_out(x)))


class Conditioner(nn.Module):
    """Shallow net mapping the low-res input stack to the target grid: conv3x3,
    SiLU, conv3x3 to ``out_channels * N^2`` channels, pixel shuffle."""

    def __init__(self, in_channels: int, factor: int, out_channels: int = 3, hidden: int = 32):
        super().__init__()
        if factor < 1:
            raise InvalidConfigError("shuffle factor must be >= 1")
        self.factor = factor
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_channels * factor * factor, 3, padding=1)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, y0):
        if self.conv2.out_channels % (self.factor**2):
            raise InvalidConfigError("conv2 channels inconsistent with shuffle factor")
        return self.shuffle(self.conv2(F.silu(self.conv1(y0))))


def conditioner_forward(params: dict, y0: torch.Tensor, factor: int) -> torch.Tensor:
    """Functional form taking raw kernels, for hand-built weights."""
    w2 = params["conv2.weight"]
    if w2.shape[0] % (factor * factor):
        raise InvalidConfigError(f"conv2 has {w2.shape[0]} output channels, not a multiple of {factor}^2")
    h = F.conv2d(y0, params["conv1.weight"], params.get("conv1.bias"), padding=params["conv1.weight"].shape[-1] // 2)
    h = F.silu(h)
    h = F.conv2d(h, w2, params.get("conv2.bias"), padding=w2.shape[-1] // 2)
    return F.pixel_shuffle(h, factor)


class CountingDenoiser:
    """Wraps a denoiser and counts network evaluations (one per batched call)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, x_t, y, t):
        self.calls += 1
        return self.inner(x_t, y, t)


class UNetDenoiser:
    kind = "unet"

    def __init__(self, net: UNet):
        self.net = net

    @torch.no_grad()
    def __call__(self, x_t, y, t):
        dtype = next(self.net.parameters()).dtype
        out = self.net(x_t.to(dtype), y.to(dtype), t)
        return out.to(x_t.dtype)


class OracleDenoiser:
    """Returns ``x_t - x_0`` for a known ``x_0``, optionally plus Gaussian noise of
    std ``sigma`` to mimic an imperfect network.

    The noise for a call is keyed by ``(seed, t, call index)`` so repeated
    runs with the same seed are reproducible.
    """

    def __init__(self, x0, sigma: float = 0.0, seed: int = 0):
        self.x0 = torch.as_tensor(np.asarray(x0)) if not torch.is_tensor(x0) else x0
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.kind = "oracle-exact" if self.sigma == 0 else "oracle-plus-noise"
        self._n = 0

    def __call__(self, x_t, y, t):
        # a batch-1 x0 is shared by every row
        if tuple(x_t.shape[1:]) != tuple(self.x0.shape[1:]) or self.x0.shape[0] not in (1, x_t.shape[0]):
            raise InvalidInputError(f"oracle built for shape {tuple(self.x0.shape)}, got {tuple(x_t.shape)}")
        eps = x_t - self.x0.to(x_t.dtype)
        if self.sigma > 0:
            tt = int(torch.as_tensor(t).reshape(-1)[0])
            z = rngs.normal(tuple(x_t.shape), rngs.TAG_ORACLE, self.seed, tt, self._n)
            self._n += 1
            eps = eps + self.sigma * torch.as_tensor(z, dtype=x_t.dtype)
        return eps


class ZeroDenoiser:
    kind = "zero"

    def __call__(self, x_t, y, t):
        return torch.zeros_like(x_t)


def make_oracle_denoiser(x0, sigma: float = 0.0, seed: int = 0) -> OracleDenoiser:
    return OracleDenoiser(x0, sigma=sigma, seed=seed)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
