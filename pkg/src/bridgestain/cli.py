"""Command-line entry point.

Every command takes ``--config file.json`` whose keys are the long option
names (dashes or underscores); flags given on the command line win. The
resolved configuration is written next to the command's output as
``resolved_config.json``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import experiments as ex
from .baseline import ColorMapBaseline
from .bridge import build_schedule
from .errors import IncompatibleCheckpointError, InvalidConfigError, InvalidInputError, InvalidStepError
from .imaging import ImageTensor, to_grayscale, upsample_bilinear
from .metrics import RandomConvExtractor, cv_map, paired_ttest, radial_power_spectrum
from .nets import UNetConfig
from .sampling import SamplerConfig, denoiser_calls, reverse_chain
from .synthdata import DatasetConfig, build_dataset, dataset_stats, load_manifest, load_split, validate_dataset
from .tensorio import read_tensor, write_png, write_tensor
from .training import TrainingConfig, make_training_data, smoothed, train

log = logging.getLogger("bridgestain")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, bad config or missing inputs; maps to exit code 2."""


# -- option tables -----------------------------------------------------------
# (flag, default, type, help). Defaults live here rather than in argparse so a
# config file can sit between the defaults and the explicit flags.

_INT, _FLOAT, _STR, _BOOL = int, float, str, bool

OPTIONS = {
    "gen-data": [
        ("out", None, _STR, "output directory"),
        ("size", 32, _INT, "tile size H = W"),
        ("factor", 2, _INT, "super-resolution factor N"),
        ("channels", 4, _INT, "autofluorescence channels (2-4)"),
        ("train-seeds", "0:2000", _STR, "train seed range a:b"),
        ("test-seeds", "100000:100200", _STR, "test seed range c:d"),
    ],
    "train": [
        ("data", None, _STR, "dataset directory"),
        ("out", None, _STR, "output directory"),
        ("preset", "default", _STR, "'default' or 'desk' (small U-Net, lr 1e-3)"),
        ("max-steps", 1000, _INT, "optimisation steps"),
        ("lr", None, _FLOAT, "learning rate"),
        ("batch-size", 8, _INT, "batch size"),
        ("seed", 0, _INT, "training seed"),
        ("T", 1000, _INT, "diffusion steps"),
        ("levels", 3, _INT, "U-Net levels"),
        ("width", None, _INT, "U-Net base width"),
        ("heads", 4, _INT, "attention heads"),
        ("time-dim", 64, _INT, "timestep code size"),
        ("attention-levels", None, _STR, "comma-separated levels with attention (default: all)"),
        ("cond-hidden", 32, _INT, "conditioner hidden channels"),
        ("weight-decay", 0.01, _FLOAT, "AdamW weight decay"),
        ("grad-clip", 1.0, _FLOAT, "global gradient-norm clip (0 disables)"),
        ("cosine", False, _BOOL, "cosine learning-rate decay"),
        ("no-augment", False, _BOOL, "disable dihedral augmentation"),
        ("patch", None, _INT, "train on patches of this size"),
        ("train-limit", None, _INT, "use only the first k training tiles"),
        ("dtype", "float32", _STR, "float32 or float64"),
        ("init-from", None, _STR, "checkpoint to fine-tune from"),
        ("log-every", 50, _INT, "log interval in steps"),
        ("checkpoint-every", 0, _INT, "periodic checkpoint interval (0: final only)"),
        ("timing", False, _BOOL, "record wall_ms in the log"),
    ],
    "sample": [
        ("checkpoint", None, _STR, "trained checkpoint"),
        ("data", None, _STR, "dataset directory"),
        ("input", None, _STR, "a single input tensor instead of a dataset split"),
        ("out", None, _STR, "output directory"),
        ("split", "test", _STR, "dataset split"),
        ("ids", None, _STR, "comma-separated sample ids"),
        ("limit", None, _INT, "first k ids of the split"),
        ("strategy", "mean", _STR, "vanilla, mean or skip"),
        ("exit", 50, _INT, "exit point t_e"),
        ("avg", 1, _INT, "pixel-wise averaging factor n"),
        ("seed", 0, _INT, "sampling seed; run k uses seed + k"),
        ("clip-x0", False, _BOOL, "clip the x0 estimate inside the chain"),
        ("batch", 32, _INT, "tiles per batch"),
        ("dtype", "float32", _STR, "sampling precision"),
        ("no-png", False, _BOOL, "skip PNG previews"),
        ("timing", False, _BOOL, "record wall-clock per tile"),
    ],
    "eval": [
        ("pred", None, _STR, "predictions: sample output directory or dataset"),
        ("truth", None, _STR, "ground truth: dataset directory"),
        ("split", "test", _STR, "dataset split"),
        ("compare", None, _STR, "second prediction set for paired t-tests, or 'baseline'"),
        ("out", None, _STR, "output directory"),
    ],
    "sweep": [
        ("kind", "exit", _STR, "exit, averaging or factor"),
        ("checkpoint", None, _STR, "trained checkpoint (exit and averaging)"),
        ("data", None, _STR, "dataset directory (exit and averaging)"),
        ("factor-runs", None, _STR, "factor sweep: 'N=ckpt@data;N=ckpt@data'"),
        ("split", "test", _STR, "dataset split"),
        ("limit", None, _INT, "first k ids of the split"),
        ("grid", None, _STR, "comma-separated grid (default per kind)"),
        ("repeats", 5, _INT, "repeated inferences per averaging setting"),
        ("exit", 50, _INT, "exit point for averaging and factor sweeps"),
        ("strategy", "mean", _STR, "strategy for the factor sweep"),
        ("seed", 0, _INT, "sampling seed"),
        ("batch", 64, _INT, "tiles per batch"),
        ("dtype", "float32", _STR, "sampling precision"),
        ("out", None, _STR, "output directory"),
        ("timing", False, _BOOL, "record wall-clock per tile"),
    ],
    "spectrum": [
        ("data", None, _STR, "dataset directory (ground truth and inputs)"),
        ("pred", None, _STR, "sample output directory (optional)"),
        ("split", "test", _STR, "dataset split"),
        ("ids", None, _STR, "comma-separated sample ids"),
        ("limit", None, _INT, "first k ids"),
        ("bins", None, _INT, "radial bins (default: unit-width rings)"),
        ("input-channel", 0, _INT, "input channel to profile"),
        ("out", None, _STR, "output directory"),
    ],
    "cv-report": [
        ("runs", None, _STR, "sample output directory with avg >= 2"),
        ("out", None, _STR, "output directory"),
        ("no-png", False, _BOOL, "skip PNG heat maps"),
    ],
    "schedule-dump": [
        ("T", 1000, _INT, "diffusion steps"),
        ("out", None, _STR, "CSV path (default stdout)"),
    ],
}


def _key(flag: str) -> str:
    return flag.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgestain", description="Brownian-bridge virtual staining toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        for flag, _, typ, hlp in opts:
            if typ is _BOOL:
                sp.add_argument(f"--{flag}", dest=_key(flag), action="store_true", default=argparse.SUPPRESS, help=hlp)
            else:
                sp.add_argument(f"--{flag}", dest=_key(flag), type=typ, default=argparse.SUPPRESS, help=hlp)
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < flags."""
    opts = OPTIONS[command]
    cfg = {_key(f): d for f, d, _, _ in opts}
    types = {_key(f): t for f, _, t, _ in opts}
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: {e}") from e
        for k, v in loaded.items():
            k = _key(k)
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r} for {command}")
            if v is not None and types[k] is not _STR:
                v = types[k](v)
            cfg[k] = v
    for k in cfg:
        if hasattr(ns, k):
            cfg[k] = getattr(ns, k)
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _write_resolved(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, **cfg}
    (out / "resolved_config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _csv_writer(f):
    return csv.writer(f, lineterminator="\r\n")


def _range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError as e:
        raise UsageError(f"bad seed range {text!r}, expected a:b") from e


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad integer list {text!r}") from e


def _dtype(name: str):
    table = {"float32": torch.float32, "float64": torch.float64}
    if name not in table:
        raise UsageError(f"dtype must be float32 or float64, got {name!r}")
    return table[name]


def _fmt(v) -> str:
    return repr(float(v))


def _dataset_root(path) -> Path:
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise UsageError(f"{root} is not a dataset (no manifest.json)")
    return root


def _select_ids(manifest, split, ids=None, limit=None) -> list[str]:
    if split not in manifest["split"]:
        raise UsageError(f"dataset has no split {split!r}")
    available = manifest["split"][split]
    if ids:
        chosen = [s.strip() for s in str(ids).split(",") if s.strip()]
        missing = sorted(set(chosen) - set(available))
        if missing:
            raise UsageError(f"ids not in split {split}: {missing}")
    else:
        chosen = list(available)
    return chosen[:limit] if limit else chosen


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg):
    _require(cfg, "out")
    config = DatasetConfig(cfg["size"], cfg["factor"], cfg["channels"], _range(cfg["train_seeds"]), _range(cfg["test_seeds"]))
    out = Path(cfg["out"])
    manifest = build_dataset(config, out)
    missing = validate_dataset(out)
    if missing:
        raise RuntimeError(f"dataset incomplete: {missing}")
    _write_resolved(out, "gen-data", cfg)
    print(f"wrote {len(manifest['split']['train'])} train / {len(manifest['split']['test'])} test tiles to {out}")


def _unet_config(cfg) -> tuple[UNetConfig, float]:
    desk = cfg["preset"] == "desk"
    if cfg["preset"] not in ("default", "desk"):
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    width = cfg["width"] or (8 if desk else 32)
    lr = cfg["lr"] if cfg["lr"] is not None else (1e-3 if desk else 1e-4)
    if cfg["attention_levels"] is not None:
        att = tuple(_int_list(cfg["attention_levels"]))
    else:
        att = (cfg["levels"] - 1,) if desk else None
    return UNetConfig(cfg["levels"], width, cfg["heads"], cfg["time_dim"], 6, 3, att), lr


def cmd_train(cfg):
    _require(cfg, "data", "out")
    root = _dataset_root(cfg["data"])
    manifest = load_manifest(root)
    unet_config, lr = _unet_config(cfg)
    ids = _select_ids(manifest, "train", limit=cfg["train_limit"])
    _, targets, inputs = load_split(root, "train", ids)
    ts, ins = dataset_stats(manifest)
    factor = manifest["generator"]["factor"]
    data = make_training_data(targets, inputs, factor, ts, ins, cfg["patch"], cfg["dtype"])
    tc = TrainingConfig(
        learning_rate=lr,
        batch_size=cfg["batch_size"],
        max_steps=cfg["max_steps"],
        seed=cfg["seed"],
        weight_decay=cfg["weight_decay"],
        grad_clip=cfg["grad_clip"] or None,
        cosine_decay=cfg["cosine"],
        augment=not cfg["no_augment"],
        log_every=cfg["log_every"],
        checkpoint_every=cfg["checkpoint_every"],
        dtype=cfg["dtype"],
        init_from=cfg["init_from"],
        record_timing=cfg["timing"],
    )
    if cfg["init_from"] and not Path(cfg["init_from"]).exists():
        raise UsageError(f"checkpoint {cfg['init_from']} not found")
    out = Path(cfg["out"])
    _write_resolved(out, "train", cfg)
    result = train(tc, data, build_schedule(cfg["T"]), unet_config, cfg["cond_hidden"], out_dir=out)
    if result.losses:
        sm = smoothed(result.losses)
        print(f"step {result.step}: smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")
    print(f"checkpoint: {out / 'checkpoint_final.ckpt'}")


def _load_ctx(cfg, checkpoint):
    if not checkpoint or not Path(checkpoint).exists():
        raise UsageError(f"checkpoint {checkpoint} not found")
    return ex.context_from_checkpoint(checkpoint, _dtype(cfg["dtype"]))


def _check_factor(ck, manifest):
    f = manifest["generator"]["factor"]
    c = manifest["generator"]["channels"]
    if ck.cond_config.factor != f or ck.cond_config.in_channels != c:
        raise UsageError(
            f"checkpoint expects factor {ck.cond_config.factor} with {ck.cond_config.in_channels} channels; "
            f"dataset has factor {f} with {c}"
        )


def cmd_sample(cfg):
    _require(cfg, "checkpoint", "out")
    sc = SamplerConfig(cfg["strategy"], cfg["exit"], cfg["avg"], cfg["seed"], cfg["clip_x0"])
    ctx, ck = _load_ctx(cfg, cfg["checkpoint"])
    sc.check(ctx.schedule.T)
    if cfg["input"]:
        img = read_tensor(cfg["input"])
        ids, y0 = ["000000"], img.data[None]
        if img.channels != ck.cond_config.in_channels:
            raise UsageError(f"input has {img.channels} channels, checkpoint expects {ck.cond_config.in_channels}")
    else:
        _require(cfg, "data")
        root = _dataset_root(cfg["data"])
        manifest = load_manifest(root)
        _check_factor(ck, manifest)
        ids = _select_ids(manifest, cfg["split"], cfg["ids"], cfg["limit"])
        _, _, y0 = load_split(root, cfg["split"], ids)
    out = Path(cfg["out"])
    _write_resolved(out, "sample", cfg)
    n = sc.averaging
    seeds = [sc.seed + k for k in range(n)]
    bounds = None
    per_tile_ms = []
    counts = []
    for sl in ex._chunks(len(ids), max(1, cfg["batch"])):
        y = ctx.condition(y0[sl])
        b = y.shape[0]
        y = y.repeat_interleave(n, dim=0)
        keys = [(s, int(ids[sl][i])) for i in range(b) for s in seeds]
        if sc.clip_x0:
            bounds = ctx.clip_bounds(y.shape[1])
        before = ctx.denoiser.calls
        t0 = time.perf_counter()
        x = reverse_chain(y, ctx.schedule, ctx.denoiser, keys, sc.strategy, sc.exit_point, bounds)
        elapsed = time.perf_counter() - t0
        counts.append(ctx.denoiser.calls - before)
        per_tile_ms.append(elapsed * 1e3 / b)
        d = ctx.finish(x).reshape(b, n, *x.shape[2:], x.shape[1])
        for i in range(b):
            sid = ids[sl][i]
            for k in range(n):
                img = ImageTensor(d[i, k], "rgb", (0.0, 1.0))
                write_tensor(out / f"{sid}_run{k}.btns", img)
                if not cfg["no_png"]:
                    write_png(out / f"{sid}_run{k}.png", img)
            avg = ImageTensor(d[i].mean(axis=0), "rgb", (0.0, 1.0))
            write_tensor(out / f"{sid}_avg.btns", avg)
            if not cfg["no_png"]:
                write_png(out / f"{sid}_avg.png", avg)
    expected = denoiser_calls(sc.strategy, ctx.schedule.T, sc.exit_point)
    manifest_out = {
        "kind": "samples",
        "checkpoint": str(cfg["checkpoint"]),
        "strategy": sc.strategy,
        "exit_point": sc.exit_point,
        "averaging": n,
        "seeds": seeds,
        "ids": ids,
        "T": ctx.schedule.T,
        "denoiser_calls_per_chain": counts[0] if counts else 0,
        "denoiser_calls_expected": expected,
        "wall_ms_per_tile": [round(v, 3) for v in per_tile_ms] if cfg["timing"] else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest_out, indent=2, sort_keys=True) + "\n")
    print(f"sampled {len(ids)} tiles x {n} runs ({sc.strategy}, t_e={sc.exit_point}); {counts[0] if counts else 0} denoiser calls per chain")


def _load_set(path, split, truth_root: Path | None = None) -> dict[str, np.ndarray]:
    """Image set by id: a sample output directory (``*_avg.btns``) or a dataset split."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise UsageError(f"{root} has no manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("kind") == "samples":
        out = {}
        for sid in manifest["ids"]:
            f = root / f"{sid}_avg.btns"
            if not f.exists():
                raise UsageError(f"missing output {f}")
            out[sid] = read_tensor(f).data
        return out
    ids, targets, _ = load_split(root, split)
    return dict(zip(ids, targets))


def _baseline_set(truth_root: Path, split: str, ids) -> dict[str, np.ndarray]:
    manifest = load_manifest(truth_root)
    factor = manifest["generator"]["factor"]
    _, tt, ti = load_split(truth_root, "train")
    model = ColorMapBaseline.fit(tt, ti, factor)
    _, _, inputs = load_split(truth_root, split, ids)
    return {sid: model.predict(inputs[i]).data for i, sid in enumerate(ids)}


def cmd_eval(cfg):
    _require(cfg, "pred", "truth", "out")
    truth_root = _dataset_root(cfg["truth"])
    truth = _load_set(truth_root, cfg["split"])
    pred = _load_set(cfg["pred"], cfg["split"])
    missing = sorted(set(pred) - set(truth))
    if missing:
        raise UsageError(f"ids without ground truth: {missing[:5]}")
    ids = sorted(pred)
    extractor = RandomConvExtractor()
    rows = [{"image_id": sid, **ex.image_metrics(pred[sid], truth[sid], extractor)} for sid in ids]
    out = Path(cfg["out"])
    _write_resolved(out, "eval", cfg)
    mean, stderr = ex.aggregate(rows)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = _csv_writer(f)
        w.writerow(["image_id", *ex.METRIC_FIELDS])
        for r in rows:
            w.writerow([r["image_id"]] + [_fmt(r[k]) for k in ex.METRIC_FIELDS])
        w.writerow(["mean"] + [_fmt(mean[k]) for k in ex.METRIC_FIELDS])
        w.writerow(["stderr"] + [_fmt(stderr[k]) for k in ex.METRIC_FIELDS])
    print(f"{len(ids)} images: ssim {mean['ssim']:.4f} psnr {mean['psnr_db']:.2f} dB perceptual {mean['perceptual']:.4f}")
    if cfg["compare"]:
        if cfg["compare"] == "baseline":
            other = _baseline_set(truth_root, cfg["split"], ids)
        else:
            other = _load_set(cfg["compare"], cfg["split"])
        if set(other) != set(pred):
            raise UsageError("prediction sets cover different ids")
        other_rows = [ex.image_metrics(other[sid], truth[sid], extractor) for sid in ids]
        with open(out / "ttest.csv", "w", newline="") as f:
            w = _csv_writer(f)
            w.writerow(["metric", "mean_a", "mean_b", "t_score", "p_value", "n"])
            for k in ex.METRIC_FIELDS:
                a = [r[k] for r in rows]
                b = [r[k] for r in other_rows]
                if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                    continue
                res = paired_ttest(a, b)
                w.writerow([k, _fmt(np.mean(a)), _fmt(np.mean(b)), _fmt(res.t_score), _fmt(res.p_value), res.n])
                print(f"  {k}: t = {res.t_score:.3f}, p = {res.p_value:.3g}")


def _split_for_sweep(cfg, data):
    root = _dataset_root(data)
    manifest = load_manifest(root)
    ids = _select_ids(manifest, cfg["split"], limit=cfg["limit"])
    _, truths, y0 = load_split(root, cfg["split"], ids)
    return manifest, ids, truths, y0


def cmd_sweep(cfg):
    _require(cfg, "out")
    kind = cfg["kind"]
    rows = []
    if kind in ("exit", "averaging"):
        _require(cfg, "checkpoint", "data")
        ctx, ck = _load_ctx(cfg, cfg["checkpoint"])
        manifest, ids, truths, y0 = _split_for_sweep(cfg, cfg["data"])
        _check_factor(ck, manifest)
        if kind == "exit":
            grid = _int_list(cfg["grid"]) if cfg["grid"] is not None else list(ex.DEFAULT_EXIT_GRID)
            if not grid:
                raise UsageError("empty grid")
            for te in grid:
                SamplerConfig("skip", te).check(ctx.schedule.T)
            rows, _ = ex.exit_sweep(ctx, y0, truths, ids, grid, cfg["seed"], cfg["batch"], timing=cfg["timing"])
        else:
            grid = _int_list(cfg["grid"]) if cfg["grid"] is not None else list(ex.DEFAULT_AVG_GRID)
            if not grid or min(grid) < 1:
                raise UsageError("averaging grid must be non-empty and >= 1")
            SamplerConfig("mean", cfg["exit"]).check(ctx.schedule.T)
            rows = ex.averaging_sweep(ctx, y0, truths, ids, grid, cfg["repeats"], cfg["exit"], cfg["seed"], timing=cfg["timing"])
    elif kind == "factor":
        _require(cfg, "factor_runs")
        runs = []
        for part in [p for p in str(cfg["factor_runs"]).split(";") if p.strip()]:
            try:
                f, rest = part.split("=")
                ckpt, data = rest.split("@")
                runs.append((int(f), ckpt, data))
            except ValueError as e:
                raise UsageError(f"bad factor run {part!r}, expected N=ckpt@data") from e
        if not runs:
            raise UsageError("empty grid")
        sc = SamplerConfig(cfg["strategy"], cfg["exit"], 1, cfg["seed"])
        for f, ckpt, data in runs:
            ctx, ck = _load_ctx(cfg, ckpt)
            manifest, ids, truths, y0 = _split_for_sweep(cfg, data)
            _check_factor(ck, manifest)
            if ck.cond_config.factor != f:
                raise UsageError(f"checkpoint {ckpt} is for factor {ck.cond_config.factor}, not {f}")
            row, _ = ex.strategy_rows(ctx, y0, truths, ids, sc, cfg["batch"], timing=cfg["timing"], grid_value=f)
            rows.append(row)
    else:
        raise UsageError(f"unknown sweep kind {kind!r}")
    out = Path(cfg["out"])
    _write_resolved(out, "sweep", cfg)
    with open(out / f"sweep_{kind}.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(ex.SWEEP_HEADER)
        for r in rows:
            w.writerow(r.cells())
    for r in rows:
        cv = f" cv {r.mean_cv:.5f}" if r.mean_cv is not None else ""
        print(f"{r.sweep} {r.strategy} {r.grid_value}: ssim {r.ssim:.4f} perceptual {r.perceptual:.4f}{cv}")


def cmd_spectrum(cfg):
    _require(cfg, "data", "out")
    root = _dataset_root(cfg["data"])
    manifest = load_manifest(root)
    ids = _select_ids(manifest, cfg["split"], cfg["ids"], cfg["limit"])
    for sid in ids:
        if not (root / cfg["split"] / f"{sid}_target.btns").exists():
            raise UsageError(f"ground truth for {sid} is missing")
    _, truths, inputs = load_split(root, cfg["split"], ids)
    factor = manifest["generator"]["factor"]
    pred = _load_set(cfg["pred"], cfg["split"]) if cfg["pred"] else None
    ch = cfg["input_channel"]
    if not 0 <= ch < inputs.shape[-1]:
        raise UsageError(f"input channel {ch} out of range")
    out = Path(cfg["out"])
    _write_resolved(out, "spectrum", cfg)
    with open(out / "spectrum.csv", "w", newline="") as f:
        w = _csv_writer(f)
        w.writerow(["image_id", "bin", "radius", "count", "input_power", "output_power", "truth_power"])
        for i, sid in enumerate(ids):
            up = upsample_bilinear(ImageTensor(inputs[i][..., ch : ch + 1], "af-stack"), factor).data[..., 0]
            p_in = radial_power_spectrum(up, cfg["bins"])
            p_gt = radial_power_spectrum(to_grayscale(truths[i]), cfg["bins"])
            p_out = radial_power_spectrum(to_grayscale(pred[sid]), cfg["bins"]) if pred is not None else None
            for b in range(len(p_gt.power)):
                w.writerow(
                    [sid, b, _fmt(p_gt.radius[b]), int(p_gt.count[b]), _fmt(p_in.power[b]), _fmt(p_out.power[b]) if p_out else "", _fmt(p_gt.power[b])]
                )
    print(f"spectra for {len(ids)} images -> {out / 'spectrum.csv'}")


def _heat_png(path, cv: np.ndarray):
    # blue -> red ramp over [0, max] of the channel-mean CV
    v = cv.mean(axis=-1)
    top = float(v.max())
    s = v / top if top > 0 else v
    rgb = np.stack([s, np.zeros_like(s), 1.0 - s], axis=-1)
    write_png(path, ImageTensor(rgb, "rgb", (0.0, 1.0)))


def cmd_cv_report(cfg):
    _require(cfg, "runs", "out")
    root = Path(cfg["runs"])
    mf = root / "manifest.json"
    if not mf.exists():
        raise UsageError(f"{root} is not a sample output directory")
    manifest = json.loads(mf.read_text())
    n = manifest.get("averaging", 1)
    if manifest.get("kind") != "samples" or n < 2:
        raise UsageError("CV needs a sample run with --avg >= 2")
    out = Path(cfg["out"])
    _write_resolved(out, "cv-report", cfg)
    rows = []
    for sid in manifest["ids"]:
        runs = [read_tensor(root / f"{sid}_run{k}.btns") for k in range(n)]
        res = cv_map(runs)
        write_tensor(out / f"{sid}_cv.btns", res.cv)
        if not cfg["no_png"]:
            _heat_png(out / f"{sid}_cv.png", res.cv.data)
        rows.append((sid, *res.mean_cv, res.overall, res.guarded))
    with open(out / "cv.csv", "w", newline="") as f:
        w = _csv_writer(f)
        w.writerow(["image_id", "cv_y", "cv_cb", "cv_cr", "mean_cv", "guarded"])
        for r in rows:
            w.writerow([r[0], *(_fmt(v) for v in r[1:5]), r[5]])
        means = np.mean([r[1:5] for r in rows], axis=0)
        w.writerow(["mean", *(_fmt(v) for v in means), sum(r[5] for r in rows)])
    print(f"mean CV over {len(rows)} images: {means[3]:.5f} (Y {means[0]:.5f}, Cb {means[1]:.5f}, Cr {means[2]:.5f})")


def cmd_schedule_dump(cfg):
    text = build_schedule(cfg["T"]).to_csv()
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_bytes(text.encode())
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "spectrum": cmd_spectrum,
    "cv-report": cmd_cv_report,
    "schedule-dump": cmd_schedule_dump,
}


def _set_threads():
    n = os.environ.get("BRIDGESTAIN_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError as e:
            raise UsageError(f"BRIDGESTAIN_THREADS must be an integer, got {n!r}") from e


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads()
        cfg = resolve(ns.command, ns)
        COMMANDS[ns.command](cfg)
    except (UsageError, InvalidConfigError, InvalidInputError, InvalidStepError, IncompatibleCheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - anything else is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
