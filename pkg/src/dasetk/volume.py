"""Volumetric data containers and deterministic file I/O.

A Volume is an ordered stack of T single-channel slices. Order is semantic:
nothing in this module ever reorders slices, because the downstream encoder
exists precisely to exploit that order.

Supported on-disk forms:

* DASE binary volume: magic ``DASE``, one version byte (=1), three
  little-endian uint32 (T, H, W), then T*H*W little-endian float32 voxels,
  slice-major then row-major. Round-trips bit-exactly.
* PGM slice stack: a directory of binary PGM (P5) files of equal size,
  8- or 16-bit, taken in lexicographic filename order.
* PFM (portable float map): grayscale ``Pf`` / 3-channel ``PF`` float
  images, written little-endian, bottom row first. Used for encoded images.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import CorruptError, FormatError, ShapeError, UndefinedMetricError

DASE_MAGIC = b"DASE"
DASE_VERSION = 1
_HEADER = struct.Struct("<4sBIII")  # magic, version, T, H, W


@dataclass(eq=False)
class Volume:
    """Ordered stack of T slices, stored as a float32 array of shape (T, H, W)."""

    voxels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"volume needs a (T, H, W) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"volume dimensions must be positive, got {arr.shape}")
        self.voxels = arr

    @property
    def t_len(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass(eq=False)
class PlanarImage:
    """Single 2D image with C channels, stored as float32 (C, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ShapeError(f"image needs a (C, H, W) array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"image dimensions must be positive, got {arr.shape}")
        self.values = arr

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class HistogramSpec:
    """Binning used by histogram_correlation. Defaults cover [0, 1] with 64 bins."""

    bins: int = 64
    range_lo: float = 0.0
    range_hi: float = 1.0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if not self.range_lo < self.range_hi:
            raise ValueError(f"empty range [{self.range_lo}, {self.range_hi}]")


# ---------------------------------------------------------------------------
# DASE binary format
# ---------------------------------------------------------------------------


def save_volume(v: Volume, path) -> None:
    """Write ``v`` in the DASE binary format (little-endian, slice-major)."""
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    header = _HEADER.pack(DASE_MAGIC, DASE_VERSION, v.t_len, v.height, v.width)
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Volume:
    """Read a volume from a DASE file or a directory of PGM slices.

    Values come back exactly as stored; no normalisation or reordering.
    """
    p = Path(path)
    if p.is_dir():
        return _load_pgm_stack(p)
    raw = p.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptError(f"{p}: truncated header ({len(raw)} bytes)")
    magic, version, t, h, w = _HEADER.unpack_from(raw)
    if magic != DASE_MAGIC:
        raise FormatError(f"{p}: bad magic {magic!r}")
    if version != DASE_VERSION:
        raise FormatError(f"{p}: unsupported version {version}")
    if min(t, h, w) < 1:
        raise CorruptError(f"{p}: degenerate dimensions T={t} H={h} W={w}")
    expected = t * h * w * 4
    got = len(raw) - _HEADER.size
    if got != expected:
        raise CorruptError(f"{p}: payload holds {got} bytes, header implies {expected}")
    vox = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w)
    return Volume(vox.copy())


# ---------------------------------------------------------------------------
# PGM slice stacks
# ---------------------------------------------------------------------------


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    # header tokens: magic, width, height, maxval; '#' starts a comment line
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = (int(t) for t in tokens)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if pixels.size != count:
        raise CorruptError(f"{path}: expected {count} pixels, file holds {pixels.size}")
    return pixels.reshape(height, width).astype(np.float32)


def _load_pgm_stack(directory: Path) -> Volume:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise FormatError(f"{directory}: no .pgm slices found")
    slices = [_read_pgm(f) for f in files]
    first = slices[0].shape
    for f, s in zip(files, slices):
        if s.shape != first:
            raise ShapeError(f"{f}: slice is {s.shape}, stack started with {first}")
    return Volume(np.stack(slices))


# ---------------------------------------------------------------------------
# PFM float images
# ---------------------------------------------------------------------------


def save_pfm(img: Union[PlanarImage, np.ndarray], path) -> None:
    """Write a 1- or 3-channel float image as little-endian PFM."""
    arr = img.values if isinstance(img, PlanarImage) else np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ShapeError(f"PFM supports 1 or 3 channels, got {c}")
    magic = b"Pf" if c == 1 else b"PF"
    header = magic + f"\n{w} {h}\n-1.0\n".encode("ascii")
    rows = np.ascontiguousarray(arr.transpose(1, 2, 0)[::-1], dtype="<f4")  # bottom-up
    Path(path).write_bytes(header + rows.tobytes())


def load_pfm(path) -> PlanarImage:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise FormatError(f"{path}: not a PFM file")
    channels = 1 if parts[0] == b"Pf" else 3
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise CorruptError(f"{path}: malformed PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    pixels = np.frombuffer(parts[3], dtype=dtype, count=w * h * channels)
    if pixels.size != w * h * channels:
        raise CorruptError(f"{path}: truncated PFM payload")
    arr = pixels.reshape(h, w, channels)[::-1].transpose(2, 0, 1)
    return PlanarImage(arr.astype(np.float32))


# ---------------------------------------------------------------------------
# Normalisation, slicing, histogram fidelity
# ---------------------------------------------------------------------------


def normalize_volume(v: Volume) -> Volume:
    """Min-max rescale the whole volume to [0, 1].

    A constant volume has no range to stretch and maps to all zeros.
    """
    lo = float(v.voxels.min())
    hi = float(v.voxels.max())
    if hi == lo:
        return Volume(np.zeros_like(v.voxels))
    out = (v.voxels.astype(np.float64) - lo) / (hi - lo)
    return Volume(out.astype(np.float32))


def slices(v: Volume) -> list[PlanarImage]:
    """Split a volume into its T single-channel slices, in stored order."""
    return [PlanarImage(v.voxels[t : t + 1].copy()) for t in range(v.t_len)]


def volume_from_slices(imgs: Sequence[PlanarImage]) -> Volume:
    """Inverse of :func:`slices`: restack single-channel images into a volume."""
    if not imgs:
        raise ShapeError("cannot build a volume from zero slices")
    planes = []
    for img in imgs:
        if img.channels != 1:
            raise ShapeError(f"volume slices must be single-channel, got {img.channels}")
        planes.append(img.values[0])
    first = planes[0].shape
    for pl in planes:
        if pl.shape != first:
            raise ShapeError(f"slice shape {pl.shape} does not match {first}")
    return Volume(np.stack(planes))


def _intensity_histogram(values: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    clipped = np.clip(values.astype(np.float64).ravel(), spec.range_lo, spec.range_hi)
    counts, _ = np.histogram(clipped, bins=spec.bins, range=(spec.range_lo, spec.range_hi))
    return counts / counts.sum()


def histogram_correlation(a, b, spec: HistogramSpec = HistogramSpec()) -> float:
    """Pearson correlation between the intensity histograms of two images/volumes.

    Out-of-range values land in the edge bins. A flat histogram on either
    side leaves the correlation undefined and raises.
    """
    ha = _intensity_histogram(_as_values(a), spec)
    hb = _intensity_histogram(_as_values(b), spec)
    da = ha - ha.mean()
    db = hb - hb.mean()
    na = float(np.sqrt((da * da).sum()))
    nb = float(np.sqrt((db * db).sum()))
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("zero-variance histogram: correlation undefined")
    r = float((da * db).sum() / (na * nb))
    return min(1.0, max(-1.0, r))


def histogram_report(a, b, spec: HistogramSpec = HistogramSpec()) -> dict:
    """JSON-ready fidelity report: {bins, range, correlation}."""
    return {
        "bins": spec.bins,
        "range": [spec.range_lo, spec.range_hi],
        "correlation": histogram_correlation(a, b, spec),
    }


def save_histogram_report(path, a, b, spec: HistogramSpec = HistogramSpec()) -> None:
    Path(path).write_text(json.dumps(histogram_report(a, b, spec), indent=2) + "\n")


def _as_values(x) -> np.ndarray:
    if isinstance(x, Volume):
        return x.voxels
    if isinstance(x, PlanarImage):
        return x.values
    arr = np.asarray(x)
    if arr.size == 0:
        raise ShapeError("empty input")
    return arr
