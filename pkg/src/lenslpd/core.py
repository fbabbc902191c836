"""Image containers, sensor geometry and file formats.

Images are channel-last ``(height, width, channels)`` arrays. Measurements
live in the *sensor* domain ``(H, W)``; scene estimates live in the *padded*
domain ``(2H, 2W)``.

Tensor files use a small binary layout::

    b"LENSTNSR" | u16 version | u16 rank | rank x u32 dims | f32 payload

All integers and floats are little-endian and the payload is row-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DomainMismatch,
    IoFailure,
    MalformedHeader,
    NonFiniteData,
    TruncatedPayload,
    UnsupportedBitDepth,
    ZeroSizedField,
)

MAGIC = b"LENSTNSR"
VERSION = 1
DOMAINS = ("sensor", "padded")


@dataclass(frozen=True)
class SensorGeometry:
    height: int
    width: int
    channels: int = 3

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"sensor must be at least 8x8, got {self.height}x{self.width}")
        if self.height % 2 or self.width % 2:
            raise ValueError(f"sensor dims must be even, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        return (2 * self.height, 2 * self.width, self.channels)

    @classmethod
    def parse(cls, text: str, channels: int = 3) -> "SensorGeometry":
        """Parse ``"HxW"`` (e.g. ``"64x64"``)."""
        try:
            h, w = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"geometry must look like HxW, got {text!r}") from None
        return cls(h, w, channels)


@dataclass(frozen=True, eq=False)
class ImageField:
    """Immutable finite image with a domain tag.

    ``data`` is copied on construction and made read-only. float32 is the
    default precision; float64 input is kept as float64.
    """

    data: np.ndarray
    domain: str = "sensor"

    def __post_init__(self):
        arr = np.asarray(self.data)
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
        arr = np.array(arr, dtype=dtype, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"ImageField needs a (H, W, C) array, got shape {arr.shape}")
        if arr.size == 0:
            raise ZeroSizedField(f"empty field of shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "padded" and (arr.shape[0] % 2 or arr.shape[1] % 2):
            raise DomainMismatch(f"padded field must have even dims, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteData("field contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

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

    @property
    def geometry(self) -> SensorGeometry:
        """Sensor geometry this field belongs to."""
        if self.domain == "padded":
            return SensorGeometry(self.height // 2, self.width // 2, self.channels)
        return SensorGeometry(self.height, self.width, self.channels)

    def require(self, domain: str) -> "ImageField":
        if self.domain != domain:
            raise DomainMismatch(f"expected a {domain}-domain field, got {self.domain}")
        return self

    def replace(self, data, domain: str | None = None) -> "ImageField":
        return ImageField(data, self.domain if domain is None else domain)

    def __repr__(self):
        return f"ImageField({self.domain}, shape={self.shape}, dtype={self.data.dtype})"


def write_array(array, path) -> None:
    """Write an arbitrary-rank array as a tensor file (stored as float32)."""
    arr = np.asarray(array)
    if arr.size == 0:
        raise ZeroSizedField(f"refusing to write empty array of shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteData("refusing to write NaN or Inf")
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_array(path) -> np.ndarray:
    """Read a tensor file into a float32 array with the stored dims."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise MalformedHeader(f"{path}: bad magic")
    version, rank = struct.unpack_from("<HH", raw, 8)
    if version != VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version}")
    head = 12 + 4 * rank
    if len(raw) < head:
        raise MalformedHeader(f"{path}: header truncated")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(raw) - head != expected:
        raise TruncatedPayload(f"{path}: payload is {len(raw) - head} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims).astype(np.float32)
    if not np.isfinite(arr).all():
        raise NonFiniteData(f"{path}: payload contains NaN or Inf")
    return arr


def write_tensor(field: ImageField, path) -> None:
    write_array(field.data, path)


def read_tensor(path, domain: str = "sensor") -> ImageField:
    arr = read_array(path)
    if arr.ndim != 3:
        raise MalformedHeader(f"{path}: expected rank 3, got rank {arr.ndim}")
    return ImageField(arr, domain)


def import_image_8bit(path) -> ImageField:
    """Load an 8-bit grayscale or RGB raster and scale it to [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F") or mode.startswith("I;16"):
                raise UnsupportedBitDepth(f"{path}: mode {mode} is not 8-bit")
            if mode in ("1", "LA"):
                img = img.convert("L")
            elif mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32)
    except UnsupportedBitDepth:
        raise
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return ImageField(arr / 255.0)


def to_uint8(data) -> np.ndarray:
    """Clamp to [0, 1] and quantise with round-half-up."""
    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def export_image_8bit(field: ImageField, path) -> None:
    q = to_uint8(field.data)
    img = Image.fromarray(q[:, :, 0] if q.shape[2] == 1 else q)
    try:
        img.save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write image {path}: {exc}") from exc
