"""Loss, optimisation loop and checkpoints.

The conditioner and the U-Net are optimised together: gradients reach the
conditioner through ``y``, which enters both the noisy input ``x_t`` and the
regression target.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import rng as rngs
from .bridge import BridgeSchedule
from .errors import IncompatibleCheckpointError, InvalidConfigError, InvalidInputError
from .imaging import ImageTensor, NormalizationStats, extract_patches
from .nets import Conditioner, UNet, UNetConfig
from .tensorio import tensor_bytes, tensor_from_bytes

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bridgestain-checkpoint"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    gamma: list[float] | None = None  # per-step weights, index t; None means all 1
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    cosine_decay: bool = False
    augment: bool = True
    log_every: int = 50
    checkpoint_every: int = 0
    dtype: str = "float32"
    init_from: str | None = None
    record_timing: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.gamma is not None and min(self.gamma) < 0:
            raise InvalidConfigError("gamma weights must be >= 0")
        if self.dtype not in _DTYPES:
            raise InvalidConfigError(f"dtype must be one of {sorted(_DTYPES)}")


@dataclass(frozen=True)
class ConditionerConfig:
    in_channels: int = 4
    factor: int = 2
    hidden: int = 32
    out_channels: int = 3


class BridgeModel(nn.Module):
    """The trainable pair: conditioner ``f_c`` and denoiser ``eps_theta``."""

    def __init__(self, unet_config: UNetConfig, cond_config: ConditionerConfig):
        super().__init__()
        if unet_config.in_channels != 2 * cond_config.out_channels:
            raise InvalidConfigError("U-Net input must be x_t and y concatenated")
        self.unet_config = unet_config
        self.cond_config = cond_config
        self.unet = UNet(unet_config)
        self.conditioner = Conditioner(cond_config.in_channels, cond_config.factor, cond_config.out_channels, cond_config.hidden)


@dataclass
class TrainingData:
    """Normalised NCHW tensors for the training pool."""

    targets: torch.Tensor
    inputs: torch.Tensor
    factor: int
    target_stats: NormalizationStats
    input_stats: NormalizationStats

    def __len__(self):
        return self.targets.shape[0]


def make_training_data(targets, inputs, factor, target_stats, input_stats, patch_size=None, dtype="float32") -> TrainingData:
    """Normalise ``(B,H,W,C)`` arrays and optionally cut them into patches.

    Patches are aligned so each target patch lines up with a whole input patch.
    """
    targets = np.asarray(targets, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(targets) == 0:
        raise InvalidInputError("empty training set")
    if patch_size is not None and patch_size < targets.shape[1]:
        if patch_size % factor:
            raise InvalidConfigError("patch size must be a multiple of the factor")
        tp, ip = [], []
        for t_img, i_img in zip(targets, inputs):
            tp += [p.data for p in extract_patches(ImageTensor(t_img), patch_size, patch_size)]
            ip += [p.data for p in extract_patches(ImageTensor(i_img, "af-stack"), patch_size // factor, patch_size // factor)]
        targets, inputs = np.stack(tp), np.stack(ip)
    t = (targets - np.asarray(target_stats.mean)) / np.asarray(target_stats.std)
    i = (inputs - np.asarray(input_stats.mean)) / np.asarray(input_stats.std)
    td = _DTYPES[dtype]
    return TrainingData(
        torch.as_tensor(t.transpose(0, 3, 1, 2).copy(), dtype=td),
        torch.as_tensor(i.transpose(0, 3, 1, 2).copy(), dtype=td),
        int(factor),
        target_stats,
        input_stats,
    )


def _per_sample(schedule_array, t, like):
    return torch.as_tensor(np.asarray(schedule_array)[np.asarray(t)], dtype=like.dtype).reshape(-1, 1, 1, 1)


def loss_terms(denoiser, conditioner, x0, y0, t, eps, schedule: BridgeSchedule, gamma=None):
    """Weighted squared error of the denoiser against ``m_t (y - x_0) + sqrt(delta_t) eps``.

    Squared error is averaged per element within a sample, then over the batch.
    Returns ``(loss, per_sample_loss)``.
    """
    if x0.shape[0] == 0:
        raise InvalidInputError("empty batch")
    t = np.asarray(t).reshape(-1)
    y = conditioner(y0) if conditioner is not None else y0
    if y.shape != x0.shape:
        raise InvalidInputError(f"condition shape {tuple(y.shape)} does not match target {tuple(x0.shape)}")
    m = _per_sample(schedule.m, t, x0)
    sd = torch.sqrt(_per_sample(schedule.delta, t, x0))
    target = m * (y - x0) + sd * eps
    x_t = x0 + target
    pred = denoiser(x_t, y, torch.as_tensor(t))
    per = ((target - pred) ** 2).flatten(1).mean(dim=1)
    if gamma is not None:
        per = per * torch.as_tensor(np.asarray(gamma, dtype=np.float64)[t], dtype=per.dtype)
    return per.mean(), per


def draw_batch(data: TrainingData, batch_size: int, T: int, seed: int, step: int, augment: bool = True):
    """Everything random about one optimisation step, keyed by ``(seed, step)``."""
    g = rngs.generator(rngs.TAG_TRAIN, seed, step)
    idx = g.integers(len(data), size=batch_size)
    tids = g.integers(8, size=batch_size) if augment else np.zeros(batch_size, dtype=int)
    t = g.integers(1, T + 1, size=batch_size)
    eps = g.standard_normal((batch_size,) + tuple(data.targets.shape[1:]))
    x0 = torch.stack([_dihedral(data.targets[i], k) for i, k in zip(idx, tids)])
    y0 = torch.stack([_dihedral(data.inputs[i], k) for i, k in zip(idx, tids)])
    return x0, y0, t, torch.as_tensor(eps, dtype=data.targets.dtype)


def _dihedral(x, tid):
    # same id convention as imaging.apply_transform, on CHW
    k, flip = int(tid) % 4, int(tid) // 4
    if flip:
        x = torch.flip(x, dims=(-1,))
    return torch.rot90(x, k, dims=(-2, -1))


def loss(batch, schedule, denoiser, conditioner, rng: np.random.Generator, gamma=None):
    """Draw ``t`` uniformly in [1, T] and ``eps`` per sample, then evaluate the loss.

    ``batch`` is ``(x0, y0)`` NCHW tensors.
    """
    x0, y0 = batch
    if x0.shape[0] == 0:
        raise InvalidInputError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    return loss_terms(denoiser, conditioner, x0, y0, t, eps, schedule, gamma)


@dataclass
class TrainResult:
    model: BridgeModel
    step: int
    losses: list[float] = field(default_factory=list)


def _lr_at(config: TrainingConfig, step: int, start: int) -> float:
    if not config.cosine_decay:
        return config.learning_rate
    frac = (step - start) / max(1, config.max_steps)
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * frac))


def train(
    config: TrainingConfig,
    data: TrainingData,
    schedule: BridgeSchedule,
    unet_config: UNetConfig,
    cond_hidden: int = 32,
    out_dir=None,
) -> TrainResult:
    """Run ``config.max_steps`` AdamW steps; returns the model and its loss trace.

    With ``out_dir`` set, writes ``train_log.csv``, periodic
    ``checkpoint_<step>.ckpt`` files and ``checkpoint_final.ckpt``.
    """
    dtype = _DTYPES[config.dtype]
    torch.manual_seed(config.seed)
    cond_config = ConditionerConfig(data.inputs.shape[1], data.factor, cond_hidden, unet_config.out_channels)
    start = 0
    if config.init_from:
        ckpt = load_checkpoint(config.init_from)
        if ckpt.unet_config != unet_config or ckpt.cond_config != cond_config or ckpt.T != schedule.T:
            raise IncompatibleCheckpointError(
                f"checkpoint {config.init_from} was trained with {ckpt.unet_config}, {ckpt.cond_config}, T={ckpt.T}"
            )
        model = ckpt.model
        start = ckpt.step
    else:
        model = BridgeModel(unet_config, cond_config)
    model = model.to(dtype)
    model.train()
    if config.gamma is not None and len(config.gamma) != schedule.T + 1:
        raise InvalidConfigError(f"gamma needs T+1={schedule.T + 1} entries, got {len(config.gamma)}")

    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\r\n")
        writer.writerow(["step", "loss", "lr", "wall_ms"])

    losses = []
    t_start = time.perf_counter()
    try:
        for step in range(start, start + config.max_steps):
            lr = _lr_at(config, step, start)
            for g in opt.param_groups:
                g["lr"] = lr
            x0, y0, t, eps = draw_batch(data, config.batch_size, schedule.T, config.seed, step, config.augment)
            value, _ = loss_terms(model.unet, model.conditioner, x0, y0, t, eps, schedule, config.gamma)
            opt.zero_grad(set_to_none=True)
            value.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            losses.append(float(value.detach()))
            done = step + 1
            if writer is not None and (done % config.log_every == 0 or done == start + config.max_steps):
                wall = f"{(time.perf_counter() - t_start) * 1e3:.1f}" if config.record_timing else ""
                writer.writerow([done, repr(losses[-1]), repr(lr), wall])
            if done % max(1, config.log_every * 10) == 0:
                log.info("step %d loss %.5f", done, losses[-1])
            if out is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{done:07d}.ckpt", model, schedule.T, done, config.seed, data)
    finally:
        if writer is not None:
            log_file.close()

    end = start + config.max_steps
    if out is not None:
        save_checkpoint(out / "checkpoint_final.ckpt", model, schedule.T, end, config.seed, data)
    model.eval()
    return TrainResult(model, end, losses)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    model: BridgeModel
    unet_config: UNetConfig
    cond_config: ConditionerConfig
    T: int
    step: int
    seed: int
    target_stats: NormalizationStats | None
    input_stats: NormalizationStats | None
    meta: dict


def _as_hwc(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1, 1)
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: BridgeModel, T: int, step: int, seed: int, data: TrainingData | None = None, extra=None):
    state = model.state_dict()
    dtype = next(model.parameters()).dtype
    precision = "f64" if dtype == torch.float64 else "f32"
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "unet": model.unet_config.to_dict(),
        "conditioner": asdict(model.cond_config),
        "T": int(T),
        "step": int(step),
        "seed": int(seed),
        "dtype": "float64" if precision == "f64" else "float32",
        "shapes": {k: list(v.shape) for k, v in state.items()},
    }
    if data is not None:
        meta["normalization"] = {"target": data.target_stats.to_dict(), "input": data.input_stats.to_dict()}
    if extra:
        meta.update(extra)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
        for name in sorted(state):
            arr = state[name].detach().cpu().numpy().astype(np.float64)
            img = ImageTensor(_as_hwc(arr), "normalized-latent", (-np.inf, np.inf))
            _zip_write(zf, f"tensors/{name}.btns", tensor_bytes(img, precision))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
        unet_config = UNetConfig.from_dict(meta["unet"])
        cond_config = ConditionerConfig(**meta["conditioner"])
        model = BridgeModel(unet_config, cond_config).to(_DTYPES[meta["dtype"]])
        state = {}
        for name, shape in meta["shapes"].items():
            arr = tensor_from_bytes(zf.read(f"tensors/{name}.btns")).data.reshape(shape)
            state[name] = torch.tensor(arr, dtype=_DTYPES[meta["dtype"]])
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise IncompatibleCheckpointError(str(e)) from e
    model.eval()
    norm = meta.get("normalization")
    ts = NormalizationStats.from_dict(norm["target"]) if norm else None
    ins = NormalizationStats.from_dict(norm["input"]) if norm else None
    return Checkpoint(model, unet_config, cond_config, meta["T"], meta["step"], meta["seed"], ts, ins, meta)
