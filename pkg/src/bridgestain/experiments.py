"""Batch evaluation and the sweep experiments (exit point, averaging, factor).

Every chain here is keyed by ``(seed, stream)`` with ``stream`` the integer
sample id, so a tile's output does not depend on which other tiles share its
batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .bridge import build_schedule
from .metrics import RandomConvExtractor, cv_map, mse_psnr, perceptual_distance, ssim
from .nets import CountingDenoiser, UNetDenoiser
from .sampling import ChainContext, SamplerConfig, exit_branches, reverse_chain
from .training import load_checkpoint

DEFAULT_EXIT_GRID = (10, 25, 50, 100, 150, 200, 300, 400, 500)
DEFAULT_AVG_GRID = (1, 2, 3, 5)


def context_from_checkpoint(path, dtype=torch.float32, T: int | None = None) -> tuple[ChainContext, object]:
    """Chain context (counting denoiser, conditioner, stats) for a checkpoint."""
    ck = load_checkpoint(path)
    net = ck.model.unet.to(dtype)
    ck.model.conditioner.to(dtype)
    den = CountingDenoiser(UNetDenoiser(net))
    ctx = ChainContext(build_schedule(T or ck.T), den, ck.model.conditioner, ck.input_stats, ck.target_stats, dtype=dtype)
    return ctx, ck


# -- metrics over image sets -------------------------------------------------

METRIC_FIELDS = ("ssim", "psnr_db", "mse", "perceptual")


def image_metrics(output, truth, extractor=None) -> dict:
    mse, psnr = mse_psnr(truth, output)
    return {
        "ssim": ssim(output, truth),
        "psnr_db": psnr,
        "mse": mse,
        "perceptual": perceptual_distance(output, truth, extractor),
    }


def aggregate(rows: Sequence[dict], fields=METRIC_FIELDS) -> tuple[dict, dict]:
    """Mean and standard error (sample sd / sqrt(n)) of each field."""
    mean, stderr = {}, {}
    for f in fields:
        v = np.asarray([r[f] for r in rows], dtype=np.float64)
        mean[f] = float(v.mean())
        stderr[f] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 and np.all(np.isfinite(v)) else float("nan")
    return mean, stderr


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepRow:
    sweep: str
    strategy: str
    grid_value: int
    ssim: float
    perceptual: float
    mean_cv: float | None
    wall_ms: float | None

    def cells(self):
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.sweep, self.strategy, str(self.grid_value), fmt(self.ssim), fmt(self.perceptual), fmt(self.mean_cv), fmt(self.wall_ms)]


SWEEP_HEADER = ["sweep", "strategy", "grid_value", "ssim", "perceptual", "mean_cv", "wall_ms"]


def exit_sweep_outputs(ctx: ChainContext, y0, ids, exit_points=DEFAULT_EXIT_GRID, seed=0, batch=64, vanilla=True):
    """Outputs of both strategies at every exit point from shared vanilla prefixes.

    Returns ``{(strategy, t_e): (B,H,W,3) array}``; ``("vanilla", 0)`` is the
    full vanilla chain when ``vanilla`` is set.
    """
    out: dict = {}
    for sl in _chunks(len(ids), batch):
        y = ctx.condition(y0[sl])
        keys = [(seed, int(i)) for i in ids[sl]]
        res = exit_branches(y, ctx.schedule, ctx.denoiser, keys, exit_points, vanilla=vanilla)
        for k, v in res.items():
            out.setdefault(k, []).append(ctx.finish(v))
    return {k: np.concatenate(v) for k, v in out.items()}


def exit_sweep(ctx, y0, truths, ids, exit_points=DEFAULT_EXIT_GRID, seed=0, batch=64, extractor=None, timing=False):
    """Rows of the exit-point sweep (mean and skip at every grid point)."""
    t0 = time.perf_counter()
    outs = exit_sweep_outputs(ctx, y0, ids, exit_points, seed, batch, vanilla=False)
    wall = (time.perf_counter() - t0) * 1e3 / len(ids) if timing else None
    extractor = extractor or RandomConvExtractor()
    rows = []
    for strategy in ("mean", "skip"):
        for te in exit_points:
            o = outs[(strategy, te)]
            s = float(np.mean([ssim(o[i], truths[i]) for i in range(len(ids))]))
            p = float(np.mean([perceptual_distance(o[i], truths[i], extractor) for i in range(len(ids))]))
            rows.append(SweepRow("exit", strategy, int(te), s, p, None, wall))
    return rows, outs


def repeated_runs(ctx: ChainContext, y0_one, stream: int, n_chains: int, seed=0, exit_point=50, strategies=("mean", "vanilla")):
    """``n_chains`` independent chains of one tile per strategy.

    Chain ``k`` uses key ``(seed + k, stream)``. The mean and vanilla chains
    share their prefix, so both come out of one pass.
    """
    y = ctx.condition(y0_one).expand(n_chains, -1, -1, -1).contiguous()
    keys = [(seed + k, stream) for k in range(n_chains)]
    if set(strategies) <= {"mean", "vanilla"}:
        res = exit_branches(y, ctx.schedule, ctx.denoiser, keys, [exit_point], vanilla=True)
        got = {"mean": res[("mean", exit_point)], "vanilla": res[("vanilla", 0)]}
        return {s: ctx.finish(got[s]) for s in strategies}
    return {
        s: ctx.finish(reverse_chain(y, ctx.schedule, ctx.denoiser, keys, s, exit_point if s != "vanilla" else 0))
        for s in strategies
    }


def averaging_cv(runs: np.ndarray, n: int, repeats: int, block: int | None = None) -> float:
    """Mean CV across ``repeats`` n-averaged outputs.

    Output ``r`` averages chains ``[r * block, r * block + n)``; ``block``
    defaults to ``n`` (disjoint consecutive groups). With a common ``block``
    the settings share chains, so comparisons across ``n`` are paired.
    """
    block = n if block is None else block
    if n > block:
        raise ValueError(f"n={n} exceeds the block size {block}")
    if runs.shape[0] < block * (repeats - 1) + n:
        raise ValueError(f"need {block * (repeats - 1) + n} chains, have {runs.shape[0]}")
    avgs = [runs[r * block : r * block + n].mean(axis=0) for r in range(repeats)]
    return cv_map(avgs).overall


def averaging_sweep(
    ctx, y0, truths, ids, grid=DEFAULT_AVG_GRID, repeats=5, exit_point=50, seed=0, strategies=("mean", "vanilla"), extractor=None, timing=False
):
    """Rows ``(strategy, n, ssim, perceptual, mean_cv)`` for each averaging factor.

    Per tile, ``repeats`` blocks of ``max(grid)`` chains are drawn once. The
    n-averaged output ``r`` is the mean of the first n chains of block ``r``,
    so every setting reuses the same chains (common random numbers) and the
    CV differences between settings are not swamped by independent noise.
    SSIM and the perceptual distance are scored on the first n-averaged output.
    """
    extractor = extractor or RandomConvExtractor()
    need = max(grid) * repeats
    acc = {(s, n): {"cv": [], "ssim": [], "perc": []} for s in strategies for n in grid}
    t0 = time.perf_counter()
    for i, sid in enumerate(ids):
        runs = repeated_runs(ctx, y0[i], int(sid), need, seed, exit_point, strategies)
        for s in strategies:
            for n in grid:
                a = acc[(s, n)]
                a["cv"].append(averaging_cv(runs[s], n, repeats, block=max(grid)))
                first = runs[s][:n].mean(axis=0)
                a["ssim"].append(ssim(first, truths[i]))
                a["perc"].append(perceptual_distance(first, truths[i], extractor))
    wall = (time.perf_counter() - t0) * 1e3 / len(ids) if timing else None
    rows = []
    for s in strategies:
        for n in grid:
            a = acc[(s, n)]
            rows.append(SweepRow("averaging", s, int(n), float(np.mean(a["ssim"])), float(np.mean(a["perc"])), float(np.mean(a["cv"])), wall))
    return rows


def strategy_rows(ctx, y0, truths, ids, config: SamplerConfig, batch=64, extractor=None, timing=False, label="factor", grid_value=0):
    """One sweep row for a single sampler setting over a tile set (used per factor)."""
    extractor = extractor or RandomConvExtractor()
    t0 = time.perf_counter()
    outs = []
    for sl in _chunks(len(ids), batch):
        y = ctx.condition(y0[sl])
        keys = [(config.seed, int(i)) for i in ids[sl]]
        outs.append(ctx.finish(reverse_chain(y, ctx.schedule, ctx.denoiser, keys, config.strategy, config.exit_point)))
    wall = (time.perf_counter() - t0) * 1e3 / len(ids) if timing else None
    o = np.concatenate(outs)
    s = float(np.mean([ssim(o[i], truths[i]) for i in range(len(ids))]))
    p = float(np.mean([perceptual_distance(o[i], truths[i], extractor) for i in range(len(ids))]))
    return SweepRow(label, config.strategy, int(grid_value), s, p, None, wall), o
