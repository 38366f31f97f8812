"""Multi-channel 3D volume container, raw and NIfTI-1 readers, cropping.

Voxel ``(x, y, z)`` of channel ``c`` lives at flat index
``((c * L + z) * H + y) * W + x``; in numpy terms the array has shape
``(C, L, H, W)`` in C order, so x varies fastest and channels are outermost.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, RubikError

DTYPE_TAG = "float32-le"
LAYOUT_TAG = "c,z,y,x;x-fastest"

_LE_F32 = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class Volume:
    """A ``W x H x L`` volume with ``C`` channels, float32, layout ``(C, L, H, W)``."""

    data: np.ndarray
    spacing: Optional[tuple] = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise RubikError(f"volume needs shape (C, L, H, W) with all sizes >= 1, got {arr.shape}")
        object.__setattr__(self, "data", np.ascontiguousarray(arr, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> tuple:
        """Spatial size as ``(W, H, L)``."""
        return (self.width, self.height, self.length)

    def voxel(self, x: int, y: int, z: int, c: int = 0) -> float:
        return float(self.data[c, z, y, x])

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(
            np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    def __repr__(self):
        return f"Volume(dims={self.dims}, channels={self.channels})"

    @classmethod
    def zeros(cls, dims: Sequence[int], channels: int = 1) -> "Volume":
        w, h, l = dims
        return cls(np.zeros((channels, l, h, w), dtype=np.float32))


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    channels: int
    dtype: str = DTYPE_TAG
    layout: str = LAYOUT_TAG
    spacing: Optional[tuple] = None

    @property
    def nbytes(self) -> int:
        w, h, l = self.dims
        return w * h * l * self.channels * 4

    def to_json(self) -> dict:
        out = {
            "dims": list(self.dims),
            "channels": self.channels,
            "dtype": self.dtype,
            "layout": self.layout,
        }
        if self.spacing is not None:
            out["spacing"] = list(self.spacing)
        return out

    @classmethod
    def from_json(cls, obj) -> "VolumeHeader":
        try:
            dims = tuple(int(d) for d in obj["dims"])
            channels = int(obj.get("channels", 1))
            dtype = obj.get("dtype", DTYPE_TAG)
            layout = obj.get("layout", LAYOUT_TAG)
            spacing = obj.get("spacing")
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"bad header: {exc}") from exc
        if len(dims) != 3 or min(dims) < 1 or channels < 1:
            raise FormatError("bad header: dims must be three positive ints, channels >= 1")
        if dtype != DTYPE_TAG or layout != LAYOUT_TAG:
            raise FormatError(f"bad header: unsupported dtype/layout {dtype!r}/{layout!r}")
        if spacing is not None:
            spacing = tuple(float(s) for s in spacing)
        return cls(dims=dims, channels=channels, spacing=spacing)

    @classmethod
    def for_volume(cls, volume: Volume) -> "VolumeHeader":
        return cls(dims=volume.dims, channels=volume.channels, spacing=volume.spacing)


def header_path_for(data_path) -> Path:
    p = Path(data_path)
    return p.with_suffix(".json")


def read_header(header_path) -> VolumeHeader:
    try:
        text = Path(header_path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read header {header_path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc}") from exc
    return VolumeHeader.from_json(obj)


def write_header(header: VolumeHeader, header_path) -> None:
    try:
        Path(header_path).write_text(json.dumps(header.to_json(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise FormatError(f"write error: {exc}") from exc


def read_payload(header: VolumeHeader, data_path) -> Volume:
    """Read a float32 payload described by ``header``."""
    try:
        raw = Path(data_path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {data_path}: {exc}") from exc
    if len(raw) != header.nbytes:
        raise FormatError(f"corrupt volume: expected {header.nbytes} bytes, found {len(raw)}")
    w, h, l = header.dims
    arr = np.frombuffer(raw, dtype=_LE_F32).reshape(header.channels, l, h, w)
    if not np.isfinite(arr).all():
        raise FormatError("invalid data: non-finite voxel values")
    return Volume(arr.astype(np.float32), spacing=header.spacing)


def write_payload(volume: Volume, data_path) -> None:
    try:
        Path(data_path).write_bytes(volume.data.astype(_LE_F32, copy=False).tobytes())
    except OSError as exc:
        raise FormatError(f"write error: {exc}") from exc


def load_raw(header_path, data_path) -> Volume:
    return read_payload(read_header(header_path), data_path)


def save_raw(volume: Volume, header_path, data_path) -> None:
    write_header(VolumeHeader.for_volume(volume), header_path)
    write_payload(volume, data_path)


# --- NIfTI-1 ---------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


def load_nifti1(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume (``.nii``).

    Supports datatypes uint8, int16, int32, float32 and float64 with 3 or 4
    dimensions; the 4th dimension becomes the channel axis.  ``scl_slope`` and
    ``scl_inter`` are applied when the slope is non-zero.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 352:
        raise FormatError("corrupt file: shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise FormatError("not NIfTI-1")

    if struct.unpack("<i", raw[0:4])[0] == 348:
        endian = "<"
    elif struct.unpack(">i", raw[0:4])[0] == 348:
        endian = ">"
    else:
        raise FormatError("corrupt file: sizeof_hdr is not 348")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "hh", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = struct.unpack(endian + "f", raw[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "ff", raw[112:120])

    ndim = dim[0]
    if ndim not in (3, 4):
        raise FormatError(f"unsupported dtype: dim[0]={ndim}, only 3D/4D volumes are read")
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported dtype: datatype code {datatype}")
    np_dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    if bitpix != np_dtype.itemsize * 8:
        raise FormatError(f"corrupt file: bitpix {bitpix} does not match datatype {datatype}")

    w, h, l = dim[1], dim[2], dim[3]
    c = dim[4] if ndim == 4 else 1
    if min(w, h, l, c) < 1:
        raise FormatError(f"corrupt file: non-positive dims {dim[1:5]}")
    offset = int(vox_offset)
    count = w * h * l * c
    end = offset + count * np_dtype.itemsize
    if offset < 348 or end > len(raw):
        raise FormatError("corrupt file: truncated payload")

    arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
    # NIfTI stores x fastest, then y, z, t: the same order as (C, L, H, W).
    arr = arr.reshape(c, l, h, w).astype(np.float64 if datatype == 64 else np.float32)
    if scl_slope != 0 and np.isfinite(scl_slope) and not (scl_slope == 1 and scl_inter == 0):
        arr = arr * scl_slope + scl_inter
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise FormatError("invalid data: non-finite voxel values")
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    return Volume(arr, spacing=spacing)


# --- geometry and intensity -----------------------------------------------

def crop(volume: Volume, origin: Sequence[int], size: Sequence[int]) -> Volume:
    """Sub-volume starting at ``origin = [x0, y0, z0]`` with ``size = [w, h, l]``."""
    x0, y0, z0 = (int(v) for v in origin)
    w, h, l = (int(v) for v in size)
    for o, s, d in zip((x0, y0, z0), (w, h, l), volume.dims):
        if o < 0 or s < 1 or o + s > d:
            raise RubikError("crop out of range")
    sub = volume.data[:, z0:z0 + l, y0:y0 + h, x0:x0 + w]
    return Volume(sub.copy(), spacing=volume.spacing)


def random_crop(volume: Volume, size: Sequence[int], seed) -> tuple:
    """Uniformly placed crop; returns ``(cropped, origin)``."""
    size = [int(s) for s in size]
    if any(s > d or s < 1 for s, d in zip(size, volume.dims)):
        raise RubikError("crop too large")
    rng = np.random.default_rng(seed)
    origin = [int(rng.integers(0, d - s + 1)) for s, d in zip(size, volume.dims)]
    return crop(volume, origin, size), origin


def normalize(volume: Volume, mode: str = "minmax01") -> Volume:
    """Per-channel intensity normalisation: ``minmax01`` or ``zscore``."""
    data = volume.data.astype(np.float64)
    out = np.empty_like(data)
    for c in range(volume.channels):
        ch = data[c]
        if mode == "minmax01":
            lo, hi = ch.min(), ch.max()
            if hi > lo:
                out[c] = (ch - lo) / (hi - lo)
                # guard rounding so the extremes land exactly on 0 and 1
                out[c][ch == lo] = 0.0
                out[c][ch == hi] = 1.0
            else:
                out[c] = 0.0
        elif mode == "zscore":
            sd = ch.std()
            if not sd > 0:
                raise RubikError("degenerate channel")
            out[c] = (ch - ch.mean()) / sd
        else:
            raise RubikError(f"unknown normalization mode {mode!r}")
    return Volume(np.clip(out, 0.0, 1.0) if mode == "minmax01" else out, spacing=volume.spacing)
