"""Interpolation baseline: an affine colour map from input channels to RGB,
fitted by least squares at the input resolution, then bilinear upsampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ImageTensor, bin_pixels, upsample_bilinear


@dataclass(frozen=True)
class ColorMapBaseline:
    coef: np.ndarray  # (C_af + 1, 3)
    factor: int

    @classmethod
    def fit(cls, targets, inputs, factor: int) -> "ColorMapBaseline":
        """``targets`` (B,H,W,3) and ``inputs`` (B,H/N,W/N,C) arrays."""
        lowres = np.stack([bin_pixels(ImageTensor(t), factor).data for t in targets])
        x = np.asarray(inputs, dtype=np.float64).reshape(-1, inputs.shape[-1])
        x = np.hstack([x, np.ones((x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(x, lowres.reshape(-1, 3), rcond=None)
        return cls(coef, int(factor))

    def predict(self, y0) -> ImageTensor:
        d = y0.data if isinstance(y0, ImageTensor) else np.asarray(y0, dtype=np.float64)
        rgb = np.concatenate([d, np.ones(d.shape[:2] + (1,))], axis=-1) @ self.coef
        up = upsample_bilinear(ImageTensor(rgb, "rgb"), self.factor)
        return up.replace(np.clip(up.data, 0.0, 1.0))
