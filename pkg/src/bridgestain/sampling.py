"""Reverse-process samplers.

Strategies, for a chain started at ``x_T = y``:

``vanilla``  every step draws from N(mu'_t, delta_tilde_t I).
``mean``     vanilla for ``t > t_e``, then the noiseless mean for ``t <= t_e``.
``skip``     vanilla for ``t > t_e``, then one jump ``x_0 = x_te - eps(x_te, t_e)``.

Step noise comes from :func:`rng.reverse_noise` keyed by ``(seed, stream, t)``,
so chains with the same key share their noise step for step. In particular a
mean or skip chain is bit-identical to the vanilla chain with the same key
down to ``x_{t_e}``.

All chain functions work on NCHW torch tensors; ``run_chain`` and
``run_averaged`` accept and return :class:`ImageTensor`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from . import rng as rngs
from .bridge import BridgeSchedule, step_mean, x0_from_eps
from .errors import InvalidConfigError, InvalidStepError
from .imaging import ImageTensor, NormalizationStats

Strategy = Literal["vanilla", "mean", "skip"]
STRATEGIES = ("vanilla", "mean", "skip")


@dataclass(frozen=True)
class SamplerConfig:
    strategy: Strategy = "mean"
    exit_point: int = 50
    averaging: int = 1
    seed: int = 0
    clip_x0: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfigError(f"unknown strategy {self.strategy!r}")
        if self.exit_point < 0:
            raise InvalidConfigError("exit point must be >= 0")
        if self.averaging < 1:
            raise InvalidConfigError("averaging count must be >= 1")

    def check(self, T: int):
        if self.exit_point > T:
            raise InvalidConfigError(f"exit point {self.exit_point} exceeds T={T}")
        if self.strategy == "skip" and self.exit_point < 1:
            raise InvalidConfigError("skip sampling needs an exit point >= 1")

    def to_dict(self):
        return asdict(self)


Keys = Sequence[tuple[int, int]]  # (seed, stream) per batch row


def step_noise(shape, keys: Keys, t: int, dtype=torch.float64) -> torch.Tensor:
    """Stack of per-row reverse noise for step ``t``."""
    if len(keys) != shape[0]:
        raise ValueError(f"{len(keys)} rng keys for a batch of {shape[0]}")
    z = np.stack([rngs.reverse_noise(tuple(shape[1:]), seed, t, stream) for seed, stream in keys])
    return torch.as_tensor(z, dtype=dtype)


def _clip_eps(x_t, eps, bounds):
    if bounds is None:
        return eps
    lo, hi = bounds
    return x_t - torch.maximum(torch.minimum(x_t - eps, hi), lo)


def _t_arg(t, x):
    return torch.full((x.shape[0],), int(t), dtype=torch.long)


def vanilla_step(x_t, y, t: int, schedule: BridgeSchedule, denoiser, keys: Keys, eps=None, clip_bounds=None):
    """One draw from N(mu'_t, delta_tilde_t I). ``t = T`` is the pinned-terminal step;
    at ``t = 1`` the variance is zero and no noise is added."""
    if not 1 <= t <= schedule.T:
        raise InvalidStepError(f"t={t} outside [1, {schedule.T}]")
    if eps is None:
        eps = denoiser(x_t, y, _t_arg(t, x_t))
    eps = _clip_eps(x_t, eps, clip_bounds)
    mean = step_mean(schedule, x_t, y, t, eps)
    var = schedule.delta_tilde[t]
    if var <= 0.0:
        return mean
    return mean + float(np.sqrt(var)) * step_noise(tuple(x_t.shape), keys, t, x_t.dtype)


def mean_step(x_t, y, t: int, schedule: BridgeSchedule, denoiser, eps=None, clip_bounds=None):
    """Noiseless step ``x_{t-1} = mu'_t``."""
    if not 1 <= t <= schedule.T - 1:
        raise InvalidStepError(f"t={t} outside [1, {schedule.T - 1}]")
    return _mean_any(x_t, y, t, schedule, denoiser, eps, clip_bounds)


def _mean_any(x_t, y, t, schedule, denoiser, eps=None, clip_bounds=None):
    if eps is None:
        eps = denoiser(x_t, y, _t_arg(t, x_t))
    return step_mean(schedule, x_t, y, t, _clip_eps(x_t, eps, clip_bounds))


def skip_exit(x_te, t_e: int, denoiser, y, eps=None, clip_bounds=None):
    """One-shot estimate ``x_0 = x_te - eps(x_te, t_e)``."""
    if eps is None:
        eps = denoiser(x_te, y, _t_arg(t_e, x_te))
    return x0_from_eps(x_te, _clip_eps(x_te, eps, clip_bounds))


def reverse_chain(
    y,
    schedule: BridgeSchedule,
    denoiser,
    keys: Keys,
    strategy: Strategy = "vanilla",
    exit_point: int = 0,
    clip_bounds=None,
    trace: dict | None = None,
):
    """Run the reverse process from ``x_T = y`` on a batch and return ``x_0``.

    If ``trace`` is a dict it receives ``trace[t] = x_t`` for every visited t.
    """
    SamplerConfig(strategy, exit_point).check(schedule.T)
    x = y.clone()
    for t in range(schedule.T, 0, -1):
        if trace is not None:
            trace[t] = x
        eps = denoiser(x, y, _t_arg(t, x))
        if strategy == "skip" and t == exit_point:
            return skip_exit(x, t, denoiser, y, eps=eps, clip_bounds=clip_bounds)
        if strategy != "vanilla" and t <= exit_point:
            x = _mean_any(x, y, t, schedule, denoiser, eps=eps, clip_bounds=clip_bounds)
        else:
            x = vanilla_step(x, y, t, schedule, denoiser, keys, eps=eps, clip_bounds=clip_bounds)
    if trace is not None:
        trace[0] = x
    return x


def denoiser_calls(strategy: Strategy, T: int, exit_point: int) -> int:
    """Network evaluations per chain: T for vanilla and mean, T - t_e + 1 for skip
    (t_e is itself evaluated to form the jump)."""
    if strategy == "skip":
        return T - exit_point + 1
    return T


def noise_budget(schedule: BridgeSchedule, strategy: Strategy, exit_point: int) -> float:
    """Total variance injected along a chain."""
    dt = schedule.delta_tilde
    if strategy == "vanilla":
        return float(dt[1:].sum())
    return float(dt[exit_point + 1 :].sum())


def exit_branches(
    y,
    schedule: BridgeSchedule,
    denoiser,
    keys: Keys,
    exit_points: Sequence[int],
    clip_bounds=None,
    vanilla: bool = False,
):
    """Mean and skip results for several exit points from one shared vanilla prefix.

    Because step noise depends only on ``(seed, stream, t)``, the vanilla
    trajectory above any exit point is the one every strategy would follow, so
    it is computed once. Returns ``{("mean"|"skip", t_e): x_0}`` and, if
    ``vanilla`` is set, ``("vanilla", 0)`` for the full vanilla chain.
    """
    points = sorted({int(p) for p in exit_points}, reverse=True)
    for p in points:
        SamplerConfig("skip", p).check(schedule.T)
    results = {}
    x = y.clone()
    lowest = points[-1] if points else 1
    stop = 1 if vanilla else lowest
    for t in range(schedule.T, stop - 1, -1):
        eps = denoiser(x, y, _t_arg(t, x))
        if t in points:
            results[("skip", t)] = skip_exit(x, t, denoiser, y, eps=eps, clip_bounds=clip_bounds)
            xm = _mean_any(x, y, t, schedule, denoiser, eps=eps, clip_bounds=clip_bounds)
            for s in range(t - 1, 0, -1):
                xm = _mean_any(xm, y, s, schedule, denoiser, clip_bounds=clip_bounds)
            results[("mean", t)] = xm
        x = vanilla_step(x, y, t, schedule, denoiser, keys, eps=eps, clip_bounds=clip_bounds)
    if vanilla:
        results[("vanilla", 0)] = x
    return results


# -- ImageTensor front end ---------------------------------------------------


def _to_nchw(img: ImageTensor | np.ndarray, dtype) -> torch.Tensor:
    d = img.data if isinstance(img, ImageTensor) else np.asarray(img)
    if d.ndim == 3:
        d = d[None]
    return torch.as_tensor(d.transpose(0, 3, 1, 2).copy(), dtype=dtype)


def _to_hwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().astype(np.float64).transpose(0, 2, 3, 1)


@dataclass
class ChainContext:
    """What a chain needs besides the sampler settings.

    ``conditioner`` maps the (normalised) low-res input to ``y``; ``None``
    means the input already is ``y``. ``input_stats``/``target_stats``
    normalise the input and denormalise the output when given.
    """

    schedule: BridgeSchedule
    denoiser: object
    conditioner: object = None
    input_stats: NormalizationStats | None = None
    target_stats: NormalizationStats | None = None
    output_range: tuple[float, float] | None = (0.0, 1.0)
    dtype: torch.dtype = torch.float64

    def condition(self, y0) -> torch.Tensor:
        d = y0.data if isinstance(y0, ImageTensor) else np.asarray(y0)
        if self.input_stats is not None:
            d = (d - np.asarray(self.input_stats.mean)) / np.asarray(self.input_stats.std)
        x = _to_nchw(d, self.dtype)
        if self.conditioner is None:
            return x
        p = next(self.conditioner.parameters())
        with torch.no_grad():
            return self.conditioner(x.to(p.dtype)).to(self.dtype)

    def clip_bounds(self, channels: int):
        if self.output_range is None:
            return None
        lo, hi = self.output_range
        lo = np.full(channels, lo, dtype=np.float64)
        hi = np.full(channels, hi, dtype=np.float64)
        if self.target_stats is not None:
            m, s = np.asarray(self.target_stats.mean), np.asarray(self.target_stats.std)
            lo, hi = (lo - m) / s, (hi - m) / s
        shape = (1, channels, 1, 1)
        return (torch.as_tensor(lo, dtype=self.dtype).reshape(shape), torch.as_tensor(hi, dtype=self.dtype).reshape(shape))

    def finish(self, x: torch.Tensor, clip: bool = True) -> np.ndarray:
        d = _to_hwc(x)
        if self.target_stats is not None:
            d = d * np.asarray(self.target_stats.std) + np.asarray(self.target_stats.mean)
        if clip and self.output_range is not None:
            d = np.clip(d, *self.output_range)
        return d


def _image(d: np.ndarray, ctx: ChainContext) -> ImageTensor:
    if ctx.target_stats is None and ctx.output_range is None:
        return ImageTensor(d, "normalized-latent", (-np.inf, np.inf))
    return ImageTensor(d, "rgb", ctx.output_range or (0.0, 1.0))


def run_chain(y0, config: SamplerConfig, ctx: ChainContext, stream: int = 0, clip_output: bool = True) -> ImageTensor:
    """Sample one output for one input.

    The output is denormalised with ``ctx.target_stats`` and clipped to
    ``ctx.output_range`` (only the final image; intermediate states are clipped
    only through ``config.clip_x0``).
    """
    config.check(ctx.schedule.T)
    y = ctx.condition(y0)
    bounds = ctx.clip_bounds(y.shape[1]) if config.clip_x0 else None
    x = reverse_chain(y, ctx.schedule, ctx.denoiser, [(config.seed, stream)], config.strategy, config.exit_point, bounds)
    return _image(ctx.finish(x, clip_output)[0], ctx)


def run_averaged(y0, config: SamplerConfig, ctx: ChainContext, seeds: Sequence[int], stream: int = 0, clip_output: bool = True):
    """Run one chain per seed (batched) and average pixel-wise.

    Returns ``(average, runs)``.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise InvalidConfigError(f"averaging seeds must be distinct, got {seeds}")
    if config.averaging != len(seeds):
        raise InvalidConfigError(f"averaging={config.averaging} but {len(seeds)} seeds given")
    config.check(ctx.schedule.T)
    y = ctx.condition(y0).expand(len(seeds), -1, -1, -1).contiguous()
    bounds = ctx.clip_bounds(y.shape[1]) if config.clip_x0 else None
    keys = [(s, stream) for s in seeds]
    x = reverse_chain(y, ctx.schedule, ctx.denoiser, keys, config.strategy, config.exit_point, bounds)
    d = ctx.finish(x, clip_output)
    runs = [_image(r, ctx) for r in d]
    return _image(d.mean(axis=0), ctx), runs


def sample_batch(
    y0_batch,
    config: SamplerConfig,
    ctx: ChainContext,
    streams: Sequence[int],
    seeds: Sequence[int] | None = None,
    clip_output: bool = True,
) -> np.ndarray:
    """Sample many inputs at once; row ``i`` uses key ``(seeds[i], streams[i])``.

    Returns a ``(B, H, W, C)`` array.
    """
    config.check(ctx.schedule.T)
    y = ctx.condition(y0_batch)
    seeds = [config.seed] * len(streams) if seeds is None else seeds
    keys = list(zip((int(s) for s in seeds), (int(s) for s in streams)))
    bounds = ctx.clip_bounds(y.shape[1]) if config.clip_x0 else None
    x = reverse_chain(y, ctx.schedule, ctx.denoiser, keys, config.strategy, config.exit_point, bounds)
    return ctx.finish(x, clip_output)
