"""Raw tensor files (``.btns``) and 8-bit PNG export.

Layout, little-endian::

    magic  "BTNS"
    version u32      1 = float32 payload, 2 = float64 payload
    H, W, C u32
    semantics u8     index into imaging.SEMANTICS
    range  f32 x 2
    data   row-major (H, W, C)

PNG output is for viewing only: values are clipped to the declared range and
quantised to 8 bits, so it does not round-trip.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .imaging import SEMANTICS, ImageTensor

MAGIC = b"BTNS"
_HEADER = struct.Struct("<4sIIIIBff")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def tensor_bytes(img: ImageTensor, precision: str = "f32") -> bytes:
    version = {"f32": 1, "f64": 2}[precision]
    h, w, c = img.shape
    lo, hi = img.value_range
    head = _HEADER.pack(MAGIC, version, h, w, c, SEMANTICS.index(img.semantics), lo, hi)
    return head + np.ascontiguousarray(img.data, dtype=_DTYPES[version]).tobytes()


def tensor_from_bytes(buf: bytes) -> ImageTensor:
    if len(buf) < _HEADER.size:
        raise TensorFormatError("truncated header")
    magic, version, h, w, c, sem, lo, hi = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version not in _DTYPES:
        raise TensorFormatError(f"unsupported version {version}")
    dt = _DTYPES[version]
    n = h * w * c
    payload = buf[_HEADER.size :]
    if len(payload) != n * dt.itemsize:
        raise TensorFormatError(f"payload has {len(payload)} bytes, expected {n * dt.itemsize}")
    if sem >= len(SEMANTICS):
        raise TensorFormatError(f"bad semantics tag {sem}")
    data = np.frombuffer(payload, dtype=dt).reshape(h, w, c).astype(np.float64)
    return ImageTensor(data, SEMANTICS[sem], (lo, hi))


def write_tensor(path, img: ImageTensor, precision: str = "f32") -> None:
    Path(path).write_bytes(tensor_bytes(img, precision))


def read_tensor(path) -> ImageTensor:
    return tensor_from_bytes(Path(path).read_bytes())


def to_uint8(img: ImageTensor) -> np.ndarray:
    lo, hi = img.value_range
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        lo, hi = float(img.data.min()), float(img.data.max())
        hi = hi if hi > lo else lo + 1.0
    d = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    return np.round(d * 255.0).astype(np.uint8)


def write_png(path, img: ImageTensor) -> None:
    from PIL import Image

    q = to_uint8(img)
    if img.channels == 3:
        im = Image.fromarray(q, mode="RGB")
    elif img.channels == 1:
        im = Image.fromarray(q[..., 0], mode="L")
    else:
        raise InvalidInputError(f"PNG export needs 1 or 3 channels, got {img.channels}")
    bio = io.BytesIO()
    # no timestamps or text chunks, so identical pixels give identical bytes
    im.save(bio, format="PNG", optimize=False)
    Path(path).write_bytes(bio.getvalue())


def read_png(path, semantics="rgb") -> ImageTensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageTensor(arr, semantics, (0.0, 1.0))
