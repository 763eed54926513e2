"""Procedural paired dataset: H&E-like RGB targets and low-res pseudo-AF inputs.

A tile is built from three latent fields on the full-resolution grid:

* ``tissue`` - low-frequency mask, 0 on bare glass;
* ``stroma`` - band-pass noise, the eosin-rich texture;
* ``nuclei`` - soft elliptical blobs.

The target is a Beer-Lambert rendering of hematoxylin/eosin densities derived
from the fields. The input stack is ``C_af`` fixed nonlinear mixes of the same
fields (with per-channel gammas and a little sensor noise), binned by ``N``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import InvalidConfigError, InvalidInputError
from .imaging import ImageTensor, NormalizationStats, bin_pixels
from .tensorio import read_tensor, write_tensor

FORMAT_VERSION = 1

# optical densities per unit stain (Ruifrok & Johnston)
_HEMATOXYLIN = np.array([0.65, 0.70, 0.29])
_EOSIN = np.array([0.07, 0.99, 0.11])
_GLASS = 0.97

_AF_GAMMA = (0.8, 1.3, 0.6, 1.5)
_AF_NOISE = 0.01


@dataclass(frozen=True)
class PairedSample:
    target: ImageTensor
    input: ImageTensor
    seed: int
    factor: int
    channels: int


def _filtered_noise(rng, size, lo, hi):
    """White noise band-passed to radial frequencies in [lo, hi) cycles per tile,
    standardised to zero mean and unit variance."""
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size) * size
    r = np.hypot(f[:, None], f[None, :])
    mask = ((r >= lo) & (r < hi)).astype(float)
    field = np.fft.ifft2(np.fft.fft2(white) * mask).real
    sd = field.std()
    return (field - field.mean()) / (sd if sd > 0 else 1.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def latent_fields(seed: int, size: int) -> dict[str, np.ndarray]:
    rng = rngs.generator(rngs.TAG_DATA, seed)
    tissue = _sigmoid(4.0 * (_filtered_noise(rng, size, 0.5, max(2.0, size / 16)) + 0.9))
    stroma = _sigmoid(2.0 * _filtered_noise(rng, size, size / 16, size / 6))

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    nuclei = np.zeros((size, size))
    count = rng.integers(2, 7) * max(1, (size * size) // 1024)
    for _ in range(int(count)):
        cy, cx = rng.uniform(0, size, 2)
        a, b = rng.uniform(1.5, 3.5, 2)
        theta = rng.uniform(0, np.pi)
        level = rng.uniform(0.6, 1.0)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / a
        v = (-(xx - cx) * s + (yy - cy) * c) / b
        blob = level * _sigmoid(6.0 * (1.0 - np.hypot(u, v)))
        nuclei = np.maximum(nuclei, blob)
    nuclei = nuclei * tissue
    return {"tissue": tissue, "stroma": stroma, "nuclei": nuclei}


def render_target(fields) -> np.ndarray:
    t, s, n = fields["tissue"], fields["stroma"], fields["nuclei"]
    hema = 1.6 * n + 0.08 * t
    eosin = t * (0.25 + 1.1 * s * (1.0 - 0.6 * n))
    od = hema[..., None] * _HEMATOXYLIN + eosin[..., None] * _EOSIN
    return np.clip(_GLASS * np.exp(-od), 0.0, 1.0)


def render_af(fields, channels: int, seed: int) -> np.ndarray:
    """Full-resolution pseudo-autofluorescence stack, ``(H, W, channels)``."""
    if channels not in (2, 3, 4):
        raise InvalidInputError(f"C_af must be 2, 3 or 4, got {channels}")
    t, s, n = fields["tissue"], fields["stroma"], fields["nuclei"]
    st = s * t
    mixes = [
        0.75 * n + 0.15 * st + 0.05 * t,
        0.6 * st + 0.2 * t - 0.25 * n + 0.15,
        0.5 * t + 0.35 * st + 0.1 * n,
        0.3 * t + 0.5 * st * st + 0.15 * n,
    ]
    rng = rngs.generator(rngs.TAG_DATA, seed, 1)
    out = []
    for k in range(channels):
        v = mixes[k] + _AF_NOISE * rng.standard_normal(t.shape)
        out.append(np.clip(v, 0.0, 1.0) ** _AF_GAMMA[k])
    return np.stack(out, axis=-1)


def generate_pair(seed: int, size: int = 32, factor: int = 2, channels: int = 4) -> PairedSample:
    if factor < 1 or size % factor:
        raise InvalidInputError(f"size {size} is not divisible by factor {factor}")
    fields = latent_fields(seed, size)
    target = ImageTensor(render_target(fields), "rgb", (0.0, 1.0))
    af = ImageTensor(render_af(fields, channels, seed), "af-stack", (0.0, 1.0))
    return PairedSample(target, bin_pixels(af, factor), int(seed), int(factor), int(channels))


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 32
    factor: int = 2
    channels: int = 4
    train_seeds: tuple[int, int] = (0, 2000)
    test_seeds: tuple[int, int] = (100000, 100200)

    def __post_init__(self):
        for name in ("train_seeds", "test_seeds"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise InvalidConfigError(f"{name} range [{lo}, {hi}) is empty")
            object.__setattr__(self, name, (int(lo), int(hi)))
        (a, b), (c, d) = self.train_seeds, self.test_seeds
        if a < d and c < b:
            raise InvalidConfigError(f"train seeds [{a}, {b}) overlap test seeds [{c}, {d})")
        if self.size % self.factor:
            raise InvalidInputError(f"size {self.size} is not divisible by factor {self.factor}")
        if self.channels not in (2, 3, 4):
            raise InvalidInputError(f"C_af must be 2, 3 or 4, got {self.channels}")

    def to_dict(self):
        d = asdict(self)
        d["train_seeds"] = list(self.train_seeds)
        d["test_seeds"] = list(self.test_seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train_seeds"] = tuple(d["train_seeds"])
        d["test_seeds"] = tuple(d["test_seeds"])
        return cls(**d)


def sample_id(seed: int) -> str:
    return f"{seed:06d}"


def _f32(img: ImageTensor) -> ImageTensor:
    return img.replace(img.data.astype(np.float32).astype(np.float64))


def build_dataset(config: DatasetConfig, out_dir) -> dict:
    """Write every tile and ``manifest.json``; return the manifest.

    Normalisation statistics come from the train split only, computed on the
    float32 values that land on disk.
    """
    out = Path(out_dir)
    splits = {"train": range(*config.train_seeds), "test": range(*config.test_seeds)}
    ids = {}
    targets, inputs = [], []
    for split, seeds in splits.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        ids[split] = []
        for seed in seeds:
            pair = generate_pair(seed, config.size, config.factor, config.channels)
            sid = sample_id(seed)
            write_tensor(out / split / f"{sid}_target.btns", pair.target)
            write_tensor(out / split / f"{sid}_input.btns", pair.input)
            ids[split].append(sid)
            if split == "train":
                targets.append(_f32(pair.target).data)
                inputs.append(_f32(pair.input).data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": config.to_dict(),
        "split": ids,
        "normalization": {
            "target": NormalizationStats.from_images(targets).to_dict(),
            "input": NormalizationStats.from_images(inputs).to_dict(),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return json.loads(path.read_text())


def validate_dataset(root) -> list[str]:
    """Return ``split/id`` for every sample with a missing file."""
    root = Path(root)
    manifest = load_manifest(root)
    missing = []
    for split, ids in manifest["split"].items():
        for sid in ids:
            if not (root / split / f"{sid}_target.btns").exists() or not (root / split / f"{sid}_input.btns").exists():
                missing.append(f"{split}/{sid}")
    return missing


def load_split(root, split: str, ids=None) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Load a split as ``(ids, targets[B,H,W,3], inputs[B,h,w,C])`` float64 arrays."""
    root = Path(root)
    manifest = load_manifest(root)
    ids = list(manifest["split"][split] if ids is None else ids)
    targets = np.stack([read_tensor(root / split / f"{i}_target.btns").data for i in ids])
    inputs = np.stack([read_tensor(root / split / f"{i}_input.btns").data for i in ids])
    return ids, targets, inputs


def dataset_stats(manifest) -> tuple[NormalizationStats, NormalizationStats]:
    n = manifest["normalization"]
    return NormalizationStats.from_dict(n["target"]), NormalizationStats.from_dict(n["input"])
