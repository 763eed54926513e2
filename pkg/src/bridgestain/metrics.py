"""Image-quality metrics, CV maps, radial power spectra and paired t-tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _stats
from scipy.ndimage import correlate1d

from .errors import InvalidConfigError, InvalidInputError
from .imaging import ImageTensor, rgb_to_ycbcr_array, to_grayscale

# -- SSIM ---------------------------------------------------------------------


@dataclass(frozen=True)
class SSIMParams:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window: str = "gaussian"  # or "global"
    window_size: int = 11
    sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _pair_arrays(a, b):
    if isinstance(a, ImageTensor) and isinstance(b, ImageTensor) and a.value_range != b.value_range:
        raise InvalidInputError(f"value ranges differ: {a.value_range} vs {b.value_range}")
    da = a.data if isinstance(a, ImageTensor) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, ImageTensor) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise InvalidInputError(f"shape mismatch: {da.shape} vs {db.shape}")
    if da.ndim == 2:
        da, db = da[..., None], db[..., None]
    return da, db


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov, c1, c2):
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def _filter_valid(x, w):
    # separable correlation, keeping only windows fully inside the image
    half = len(w) // 2
    out = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half : x.shape[0] - half, half : x.shape[1] - half]


def ssim_map(a, b, params: SSIMParams = SSIMParams()) -> np.ndarray:
    """Per-window SSIM, ``(H - k + 1, W - k + 1, C)`` for a k x k window."""
    da, db = _pair_arrays(a, b)
    k = params.window_size
    if k > min(da.shape[0], da.shape[1]) or k % 2 == 0:
        raise InvalidConfigError(f"window {k} does not fit a {da.shape[0]}x{da.shape[1]} image")
    w = gaussian_window(k, params.sigma)
    out = []
    for c in range(da.shape[2]):
        x, y = da[..., c], db[..., c]
        mu_x, mu_y = _filter_valid(x, w), _filter_valid(y, w)
        var_x = _filter_valid(x * x, w) - mu_x**2
        var_y = _filter_valid(y * y, w) - mu_y**2
        cov = _filter_valid(x * y, w) - mu_x * mu_y
        out.append(_ssim_formula(mu_x, mu_y, var_x, var_y, cov, params.c1, params.c2))
    return np.stack(out, axis=-1)


def ssim(a, b, params: SSIMParams = SSIMParams()) -> float:
    """Structural similarity; channels are scored separately and averaged."""
    if params.window == "global":
        da, db = _pair_arrays(a, b)
        vals = []
        for c in range(da.shape[2]):
            x, y = da[..., c], db[..., c]
            mx, my = x.mean(), y.mean()
            vals.append(
                _ssim_formula(mx, my, x.var(), y.var(), ((x - mx) * (y - my)).mean(), params.c1, params.c2)
            )
        return float(np.mean(vals))
    if params.window != "gaussian":
        raise InvalidConfigError(f"unknown SSIM window {params.window!r}")
    return float(ssim_map(a, b, params).mean())


# -- MSE / PSNR ---------------------------------------------------------------


def mse_psnr(reference, other) -> tuple[float, float]:
    """MSE over all samples and PSNR against the reference's own maximum.

    PSNR is ``inf`` when the images are identical.
    """
    da, db = _pair_arrays(reference, other)
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return 0.0, math.inf
    peak = float(da.max())
    return mse, 10.0 * math.log10(peak * peak / mse)


# -- perceptual distance ------------------------------------------------------


class RandomConvExtractor:
    """Fixed random conv stack standing in for a pretrained backbone.

    Layer ``l`` is conv3x3 ('same'), ReLU, then 2x2 average pooling before the
    next layer. Features are unit-normalised along channels at every pixel.
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (8, 16, 32), seed: int = 0):
        g = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)
        self.kernels = []
        c = in_channels
        for w in self.widths:
            k = g.standard_normal((w, c, 3, 3)) / math.sqrt(9 * c)
            self.kernels.append((k, g.standard_normal(w) * 0.1))
            c = w

    def layer_dims(self, h: int, w: int) -> list[tuple[int, int, int]]:
        dims = []
        for i, c in enumerate(self.widths):
            dims.append((h, w, c))
            h, w = h // 2, w // 2
        return dims

    def __call__(self, img: np.ndarray) -> list[np.ndarray]:
        import torch
        import torch.nn.functional as F

        x = torch.as_tensor(np.asarray(img, dtype=np.float64).transpose(2, 0, 1)[None].copy())
        if x.shape[1] != self.in_channels:
            raise InvalidConfigError(f"extractor expects {self.in_channels} channels, got {x.shape[1]}")
        feats = []
        for i, (k, bias) in enumerate(self.kernels):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(F.conv2d(x, torch.as_tensor(k), torch.as_tensor(bias), padding=1))
            n = x / (torch.sqrt((x * x).sum(dim=1, keepdim=True)) + 1e-10)
            feats.append(n[0].numpy().transpose(1, 2, 0))
        return feats


def perceptual_distance(m, m0, extractor=None) -> float:
    """``sum_l mean_{h,w} ||f_l(m)[h,w] - f_l(m0)[h,w]||^2`` over extractor layers."""
    da, db = _pair_arrays(m, m0)
    extractor = extractor or RandomConvExtractor(in_channels=da.shape[2])
    fa, fb = extractor(da), extractor(db)
    declared = extractor.layer_dims(da.shape[0], da.shape[1]) if hasattr(extractor, "layer_dims") else None
    total = 0.0
    for l, (na, nb) in enumerate(zip(fa, fb)):
        if na.shape != nb.shape or (declared is not None and tuple(na.shape) != tuple(declared[l])):
            raise InvalidConfigError(f"layer {l} produced {na.shape}, expected {declared[l] if declared else nb.shape}")
        h, w = na.shape[:2]
        total += float(((na - nb) ** 2).sum()) / (h * w)
    return total


# -- coefficient of variation -------------------------------------------------

CV_FLOOR = 1e-6


@dataclass(frozen=True)
class CVResult:
    cv: ImageTensor  # per-pixel CV in Y, Cb, Cr
    mean_cv: tuple[float, float, float]
    overall: float  # mean over channels and pixels
    guarded: int  # pixels whose mean fell under the floor


def cv_map(runs: Sequence, floor: float = CV_FLOOR) -> CVResult:
    """Pixel-wise std/mean of repeated RGB outputs, in YCbCr.

    Uses the sample (n - 1) standard deviation. Pixels whose mean is below
    ``floor`` get CV 0 and are counted in ``guarded``.
    """
    if len(runs) < 2:
        raise InvalidInputError("CV needs at least two runs")
    arrs = [r.data if isinstance(r, ImageTensor) else np.asarray(r, dtype=np.float64) for r in runs]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise InvalidInputError("runs differ in shape")
    ycc = rgb_to_ycbcr_array(np.stack(arrs))
    # deviations from the first run keep identical runs at exactly zero spread
    dev = ycc - ycc[0]
    mean = ycc[0] + dev.mean(axis=0)
    sd = dev.std(axis=0, ddof=1)
    low = mean < floor
    cv = np.where(low, 0.0, sd / np.where(low, 1.0, mean))
    per_channel = tuple(float(v) for v in cv.reshape(-1, 3).mean(axis=0))
    return CVResult(ImageTensor(cv, "ycbcr", (0.0, np.inf)), per_channel, float(cv.mean()), int(low.sum()))


def mean_cv(groups: Sequence[Sequence]) -> float:
    """Mean CV over several images, each given as its list of repeated runs."""
    return float(np.mean([cv_map(g).overall for g in groups]))


# -- radial power spectrum ----------------------------------------------------


@dataclass(frozen=True)
class RadialProfile:
    radius: np.ndarray  # upper edge of each bin, in frequency-index units
    power: np.ndarray  # mean |F|^2 in the bin (0 for empty bins)
    count: np.ndarray


def radial_power_spectrum(img, bins: int | None = None) -> RadialProfile:
    """Radially averaged ``|FFT|^2`` of a square single-channel (or RGB, taken
    to luma) image.

    Bin 0 holds only the DC term. With ``bins=None`` bin ``k >= 1`` covers
    radii in ``(k-1, k]``; otherwise ``bins - 1`` equal-width annuli span
    ``(0, r_max]``. Every frequency lands in exactly one bin.
    """
    g = to_grayscale(img)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise InvalidInputError(f"radial spectrum needs a square image, got {g.shape}")
    n = g.shape[0]
    power = np.abs(np.fft.fft2(g)) ** 2
    f = np.fft.fftfreq(n) * n
    r = np.hypot(f[:, None], f[None, :])
    r_max = float(r.max())
    if bins is None:
        width = 1.0
        nb = int(math.ceil(r_max)) + 1
    else:
        if bins < 2:
            raise InvalidConfigError("need at least 2 bins")
        nb = int(bins)
        width = r_max / (nb - 1) if r_max > 0 else 1.0
    idx = np.ceil(r / width - 1e-9).astype(int)
    idx = np.clip(idx, 0, nb - 1)
    idx[r == 0] = 0
    count = np.bincount(idx.ravel(), minlength=nb)
    total = np.bincount(idx.ravel(), weights=power.ravel(), minlength=nb)
    mean = np.divide(total, count, out=np.zeros(nb), where=count > 0)
    return RadialProfile(np.arange(nb) * width, mean, count)


# -- paired t-test ------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t_score: float
    p_value: float
    n: int

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value <= alpha


def paired_ttest(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t-test on ``d = a - b``.

    Zero-variance differences give ``t = 0, p = 1`` when the mean difference is
    also zero and ``t = +-inf, p = 0`` otherwise.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired scores must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise InvalidInputError("need at least two pairs")
    d = a - b
    md = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(0.0, 1.0, n)
        return TTestResult(math.copysign(math.inf, md), 0.0, n)
    t = md / (sd / math.sqrt(n))
    p = float(2.0 * _stats.t.sf(abs(t), n - 1))
    return TTestResult(float(t), min(1.0, p), n)
