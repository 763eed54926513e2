"""Image container and pixel-level primitives.

Images are stored as ``(H, W, C)`` float64 arrays. Everything here is a pure
function: inputs are never modified and the same inputs (and rng state)
produce bit-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidInputError

Semantics = Literal["rgb", "ycbcr", "af-stack", "normalized-latent"]
SEMANTICS: tuple[str, ...] = ("rgb", "ycbcr", "af-stack", "normalized-latent")

STD_FLOOR = 1e-6

# full-range BT.601
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray
    semantics: Semantics = "rgb"
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"expected an HxWxC array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("image contains NaN or Inf")
        if self.semantics not in SEMANTICS:
            raise InvalidInputError(f"unknown semantics {self.semantics!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "value_range", (float(self.value_range[0]), float(self.value_range[1])))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data=None, **kw) -> "ImageTensor":
        return ImageTensor(
            self.data if data is None else data,
            kw.get("semantics", self.semantics),
            kw.get("value_range", self.value_range),
        )


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    scope: Literal["per-image", "dataset"] = "dataset"

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise InvalidInputError("mean and std must have the same channel count")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(max(float(s), STD_FLOOR) for s in self.std))

    @property
    def channels(self) -> int:
        return len(self.mean)

    @classmethod
    def from_images(cls, images, scope="dataset") -> "NormalizationStats":
        """Per-channel moments pooled over every pixel of every image."""
        arrays = [im.data if isinstance(im, ImageTensor) else np.asarray(im) for im in images]
        if not arrays:
            raise InvalidInputError("no images to compute statistics from")
        c = arrays[0].shape[-1]
        flat = np.concatenate([a.reshape(-1, c) for a in arrays], axis=0)
        return cls(tuple(flat.mean(axis=0)), tuple(flat.std(axis=0)), scope)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("scope", "dataset"))


def _data(img) -> np.ndarray:
    return img.data if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)


def to_ycbcr(img: ImageTensor) -> ImageTensor:
    """RGB in [0, 1] to full-range BT.601 YCbCr with chroma centred on 0.5."""
    if img.semantics != "rgb" or img.channels != 3:
        raise InvalidInputError(f"to_ycbcr needs a 3-channel rgb image, got {img.channels}ch {img.semantics}")
    out = img.data @ _RGB2YCC.T + _CHROMA_OFFSET
    return ImageTensor(out, "ycbcr", img.value_range)


def from_ycbcr(img: ImageTensor) -> ImageTensor:
    if img.semantics != "ycbcr" or img.channels != 3:
        raise InvalidInputError(f"from_ycbcr needs a 3-channel ycbcr image, got {img.channels}ch {img.semantics}")
    out = (img.data - _CHROMA_OFFSET) @ _YCC2RGB.T
    return ImageTensor(out, "rgb", img.value_range)


def rgb_to_ycbcr_array(rgb: np.ndarray) -> np.ndarray:
    """Array form of :func:`to_ycbcr` for ``(..., 3)`` stacks."""
    return np.asarray(rgb, dtype=np.float64) @ _RGB2YCC.T + _CHROMA_OFFSET


def to_grayscale(img) -> np.ndarray:
    """Luma (BT.601) of an RGB image, or the single channel of a 1-channel image."""
    d = _data(img)
    if d.ndim == 2:
        return d
    if d.shape[-1] == 1:
        return d[..., 0]
    if d.shape[-1] != 3:
        raise InvalidInputError("grayscale conversion needs 1 or 3 channels")
    return d @ _RGB2YCC[0]


def bin_pixels(img: ImageTensor, factor: int) -> ImageTensor:
    """Average non-overlapping ``factor x factor`` blocks."""
    n = int(factor)
    if n < 1:
        raise InvalidInputError("binning factor must be >= 1")
    h, w, c = img.shape
    if h % n or w % n:
        raise InvalidInputError(f"{h}x{w} image is not divisible by binning factor {n}")
    out = img.data.reshape(h // n, n, w // n, n, c).mean(axis=(1, 3))
    return img.replace(out)


def upsample_nearest(img: ImageTensor, factor: int) -> ImageTensor:
    n = int(factor)
    return img.replace(np.repeat(np.repeat(img.data, n, axis=0), n, axis=1))


def _bilinear_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample_bilinear(img: ImageTensor, factor: int | None = None, size: tuple[int, int] | None = None) -> ImageTensor:
    h, w, _ = img.shape
    if size is None:
        if factor is None:
            raise InvalidInputError("give either factor or size")
        size = (h * int(factor), w * int(factor))
    lo, hi, fr = _bilinear_weights(h, size[0])
    rows = img.data[lo] * (1 - fr)[:, None, None] + img.data[hi] * fr[:, None, None]
    lo, hi, fr = _bilinear_weights(w, size[1])
    out = rows[:, lo] * (1 - fr)[None, :, None] + rows[:, hi] * fr[None, :, None]
    return img.replace(out)


def pixel_shuffle(img: ImageTensor, factor: int) -> ImageTensor:
    """Depth-to-space: ``out[i*N+a, j*N+b, c] = in[i, j, c*N*N + a*N + b]``."""
    n = int(factor)
    h, w, c = img.shape
    if n < 1 or c % (n * n):
        raise InvalidInputError(f"{c} channels are not divisible by {n}^2")
    co = c // (n * n)
    out = img.data.reshape(h, w, co, n, n).transpose(0, 3, 1, 4, 2).reshape(h * n, w * n, co)
    return img.replace(out)


def pixel_unshuffle(img: ImageTensor, factor: int) -> ImageTensor:
    n = int(factor)
    h, w, c = img.shape
    if n < 1 or h % n or w % n:
        raise InvalidInputError(f"{h}x{w} image is not divisible by {n}")
    out = img.data.reshape(h // n, n, w // n, n, c).transpose(0, 2, 4, 1, 3).reshape(h // n, w // n, c * n * n)
    return img.replace(out)


def extract_patches(img: ImageTensor, size: int, stride: int) -> list[ImageTensor]:
    """All fully contained ``size x size`` windows in raster order; borders are dropped."""
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if size < 1 or size > min(img.height, img.width):
        raise InvalidInputError(f"patch size {size} does not fit in a {img.height}x{img.width} image")
    patches = []
    for top in range(0, img.height - size + 1, stride):
        for left in range(0, img.width - size + 1, stride):
            patches.append(img.replace(img.data[top : top + size, left : left + size].copy()))
    return patches


# Dihedral group D4: id = 4*flip + k, output = rot90(fliplr?(x), k).
N_TRANSFORMS = 8


def apply_transform(img: ImageTensor, transform_id: int) -> ImageTensor:
    tid = int(transform_id)
    if not 0 <= tid < N_TRANSFORMS:
        raise InvalidInputError(f"transform id must be in [0, 8), got {tid}")
    k, flip = tid % 4, tid // 4
    if k % 2 and img.height != img.width:
        raise InvalidInputError("90-degree rotations need a square patch")
    d = img.data[:, ::-1] if flip else img.data
    return img.replace(np.ascontiguousarray(np.rot90(d, k, axes=(0, 1))))


def invert_transform(img: ImageTensor, transform_id: int) -> ImageTensor:
    tid = int(transform_id)
    k, flip = tid % 4, tid // 4
    d = np.rot90(img.data, -k, axes=(0, 1))
    if flip:
        d = d[:, ::-1]
    return img.replace(np.ascontiguousarray(d))


def augment(patch: ImageTensor, rng: np.random.Generator) -> tuple[ImageTensor, int]:
    """Apply one of the 8 flips/rotations chosen uniformly.

    The returned id lets the caller apply the same transform to the paired
    image (``apply_transform``).
    """
    tid = int(rng.integers(N_TRANSFORMS))
    return apply_transform(patch, tid), tid


def normalize(img: ImageTensor, stats: NormalizationStats) -> ImageTensor:
    if stats.channels != img.channels:
        raise InvalidInputError(f"stats have {stats.channels} channels, image has {img.channels}")
    out = (img.data - np.asarray(stats.mean)) / np.asarray(stats.std)
    # keep the source range so denormalize can restore it
    return ImageTensor(out, "normalized-latent", img.value_range)


def denormalize(img: ImageTensor, stats: NormalizationStats, semantics: Semantics = "rgb") -> ImageTensor:
    if stats.channels != img.channels:
        raise InvalidInputError(f"stats have {stats.channels} channels, image has {img.channels}")
    out = img.data * np.asarray(stats.std) + np.asarray(stats.mean)
    return ImageTensor(out, semantics, img.value_range)
