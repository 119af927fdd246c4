"""Raster containers, PGM/COPF I/O and slice pre-processing.

Pixel arrays are stored row-major as ``(height, width)`` numpy arrays.
Containers are frozen dataclasses holding read-only arrays, so they can be
shared between threads without copying.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

# 90 um field of view standardized to 512 px
DEFAULT_SPACING = 90.0 / 512.0

COPF_MAGIC = b"COPF"
COPF_VERSION = 1
_COPF_HEADER = struct.Struct("<4sBIIf")
# refuse absurd headers before allocating
_COPF_MAX_PIXELS = 1 << 30


class FormatError(ValueError):
    """Malformed, truncated or unsupported raster file."""


class DimensionMismatchError(ValueError):
    """Two rasters that must share a grid do not."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Field2D:
    """Real-valued raster with isotropic pixel spacing in um.

    ``role="probability"`` additionally requires every value to lie in [0, 1].
    """

    values: np.ndarray
    spacing: float = DEFAULT_SPACING
    role: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"Field2D needs a non-empty 2D array, got shape {v.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if self.role == "probability" and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("probability field has values outside [0, 1]")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def shape(self):
        return self.values.shape

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def with_values(self, values, role=None) -> "Field2D":
        return Field2D(values, self.spacing, role)

    @classmethod
    def from_mask(cls, mask: "BinaryMask", spacing: float = DEFAULT_SPACING) -> "Field2D":
        return cls(mask.bits.astype(np.float64), spacing, "probability")


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError(f"BinaryMask needs a non-empty 2D array, got shape {b.shape}")
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def shape(self):
        return self.bits.shape

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Instance labelling; 0 is contour/background, cells are 1..K."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.shape[0] < 1 or lab.shape[1] < 1:
            raise ValueError(f"LabelMap needs a non-empty 2D array, got shape {lab.shape}")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.int64)))

    @property
    def shape(self):
        return self.labels.shape

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.labels, other.labels)


Raster = Union[Field2D, BinaryMask, LabelMap]


def _array_of(r: Raster) -> np.ndarray:
    if isinstance(r, Field2D):
        return r.values
    if isinstance(r, BinaryMask):
        return r.bits
    return r.labels


def check_same_shape(*rasters) -> None:
    shapes = {_array_of(r).shape if not isinstance(r, np.ndarray) else r.shape for r in rasters}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"raster shapes differ: {sorted(shapes)}")


# ---------------------------------------------------------------- PGM

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm_header(data: bytes):
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError("malformed PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"malformed PGM header token {m.group(1)!r}") from None
        pos = m.end()
    # exactly one whitespace byte separates header and raster
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        if pos == len(data):
            raise FormatError("truncated PGM payload")
        raise FormatError("malformed PGM header")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM dimensions {width}x{height}")
    return width, height, maxval, pos + 1


def read_pgm(path) -> Union[BinaryMask, LabelMap]:
    """Read a P5 PGM.

    An 8-bit file holding only 0/255 becomes a BinaryMask; anything else
    (8-bit with other values, or 16-bit) becomes a LabelMap.
    """
    data = Path(path).read_bytes()
    width, height, maxval, offset = _parse_pgm_header(data)
    if maxval == 255:
        dtype = np.dtype("u1")
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    n = width * height * dtype.itemsize
    payload = data[offset:]
    if len(payload) < n:
        raise FormatError(f"truncated PGM payload: expected {n} bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:n], dtype=dtype).reshape(height, width)
    if maxval == 255 and np.isin(arr, (0, 255)).all():
        return BinaryMask(arr == 255)
    return LabelMap(arr.astype(np.int64))


def write_pgm(raster: Union[BinaryMask, LabelMap], path) -> None:
    if isinstance(raster, BinaryMask):
        maxval, payload = 255, (raster.bits.astype(np.uint8) * 255).tobytes()
    elif isinstance(raster, LabelMap):
        if raster.n_labels > 65535:
            raise ValueError(f"{raster.n_labels} labels do not fit a 16-bit PGM")
        maxval, payload = 65535, raster.labels.astype(">u2").tobytes()
    else:
        raise TypeError(f"cannot write {type(raster).__name__} as PGM")
    header = b"P5\n%d %d\n%d\n" % (raster.width, raster.height, maxval)
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------- COPF

def write_copf(field: Field2D, path) -> None:
    """Write ``field`` as COPF v1 (values stored as little-endian f32)."""
    header = _COPF_HEADER.pack(COPF_MAGIC, COPF_VERSION, field.width, field.height, field.spacing)
    Path(path).write_bytes(header + field.values.astype("<f4").tobytes())


def read_copf(path) -> Field2D:
    data = Path(path).read_bytes()
    if len(data) < _COPF_HEADER.size:
        raise FormatError("truncated COPF header")
    magic, version, width, height, spacing = _COPF_HEADER.unpack_from(data)
    if magic != COPF_MAGIC:
        raise FormatError(f"bad COPF magic {magic!r}")
    if version != COPF_VERSION:
        raise FormatError(f"unsupported COPF version {version}")
    if width < 1 or height < 1 or width * height > _COPF_MAX_PIXELS:
        raise FormatError(f"COPF dimensions {width}x{height} out of range")
    expected = width * height * 4
    payload = data[_COPF_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(f"COPF payload size mismatch: expected {expected} bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return Field2D(values.astype(np.float64), float(spacing))


# ---------------------------------------------------------------- pre-processing

def zscore_slice(field: Field2D) -> Field2D:
    """Zero-mean, unit population-std normalization; constant slices map to 0."""
    v = field.values
    mean = v.mean()
    std = v.std()
    if std <= 1e-12 * max(1.0, abs(mean)):
        return field.with_values(np.zeros_like(v))
    return field.with_values((v - mean) / std)


def _sample_coords(n_src: int, n_dst: int) -> np.ndarray:
    # corner-aligned: first and last samples coincide
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def _bilinear(v: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = v.shape
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = xs - x0
    top = v[y0][:, x0] * (1 - fx) + v[y0][:, x1] * fx
    bottom = v[y1][:, x0] * (1 - fx) + v[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize(raster: Raster, target_w: int, target_h: int, mode: Optional[str] = None) -> Raster:
    """Resample onto a ``target_w`` x ``target_h`` grid.

    ``mode`` is ``"bilinear"`` (the default for Field2D) or ``"nearest"``
    (the default and only choice for masks and label maps).  For fields the
    spacing is rescaled by the width ratio.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    if mode is None:
        mode = "bilinear" if isinstance(raster, Field2D) else "nearest"
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resize mode {mode!r}")
    if mode == "bilinear" and not isinstance(raster, Field2D):
        raise ValueError(f"bilinear resize is undefined for {type(raster).__name__}")

    src = _array_of(raster)
    h, w = src.shape
    ys = _sample_coords(h, target_h)
    xs = _sample_coords(w, target_w)
    if mode == "bilinear":
        out = _bilinear(src, ys, xs)
    else:
        iy = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        ix = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        out = src[iy][:, ix]

    if isinstance(raster, Field2D):
        return Field2D(out, raster.spacing * w / target_w, raster.role)
    if isinstance(raster, BinaryMask):
        return BinaryMask(out)
    return LabelMap(out)


def binarize(field: Field2D, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return BinaryMask(field.values >= threshold)
