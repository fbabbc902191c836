"""Cropped-convolution camera model.

The camera maps a padded scene ``x`` of shape ``(2H, 2W, C)`` to a sensor
measurement ``b = crop(psf * x)`` of shape ``(H, W, C)``, where ``*`` is a
per-channel circular convolution and ``crop`` keeps the centred ``H x W``
window. The adjoint zero-pads a sensor image back to ``(2H, 2W)`` and
circularly cross-correlates it with the same kernel.

Sensor-sized kernels are centred: the impulse at pixel ``(H // 2, W // 2)``
is the identity kernel. After zero padding it sits at the centre of the
padded grid, and an ``ifftshift`` moves it to the origin before the
frequency-domain product.

Array-level helpers (``*_array``) work on any leading batch dims and are
what the solvers and the network use; the :class:`ImageField` functions wrap
them with domain checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .core import ImageField, SensorGeometry
from .errors import ShapeMismatch

SPATIAL = (-3, -2)


@dataclass(frozen=True)
class CropPadPlan:
    """Index bookkeeping for the sensor window inside the padded grid."""

    geometry: SensorGeometry

    @property
    def padded_dims(self) -> tuple[int, int]:
        return (2 * self.geometry.height, 2 * self.geometry.width)

    @property
    def crop_offset(self) -> tuple[int, int]:
        return (self.geometry.height // 2, self.geometry.width // 2)

    @property
    def window(self) -> tuple[slice, slice]:
        r, c = self.crop_offset
        return slice(r, r + self.geometry.height), slice(c, c + self.geometry.width)


def _hw(arr, axes=SPATIAL) -> tuple[int, int]:
    return arr.shape[axes[0]], arr.shape[axes[1]]


def _window(ndim: int, axes, rows: slice, cols: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axes[0]], idx[axes[1]] = rows, cols
    return tuple(idx)


def pad_array(y: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """Zero-pad the spatial axes from ``(H, W)`` to ``(2H, 2W)`` with ``y`` centred."""
    h, w = _hw(y, axes)
    shape = list(y.shape)
    shape[axes[0]], shape[axes[1]] = 2 * h, 2 * w
    out = np.zeros(shape, dtype=y.dtype)
    out[_window(y.ndim, axes, slice(h // 2, h // 2 + h), slice(w // 2, w // 2 + w))] = y
    return out


def crop_array(x: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """Centred ``(H, W)`` window of a ``(2H, 2W)`` array."""
    h2, w2 = _hw(x, axes)
    if h2 % 2 or w2 % 2:
        raise ShapeMismatch(f"padded dims must be even, got {h2}x{w2}")
    h, w = h2 // 2, w2 // 2
    return x[_window(x.ndim, axes, slice(h // 2, h // 2 + h), slice(w // 2, w // 2 + w))]


def _real_dtype(*arrays):
    return np.result_type(*(a.dtype for a in arrays), np.float32)


def circular_convolve_array(a: np.ndarray, k: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """out[n] = sum_m a[m] k[(n - m) mod N] over the two spatial axes."""
    if _hw(a, axes) != _hw(k, axes):
        raise ShapeMismatch(f"spatial dims differ: {a.shape} vs {k.shape}")
    s = _hw(a, axes)
    out = sfft.irfft2(sfft.rfft2(a, axes=axes) * sfft.rfft2(k, axes=axes), s=s, axes=axes)
    return out.astype(_real_dtype(a, k), copy=False)


def circular_correlate_array(a: np.ndarray, k: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """out[n] = sum_m a[m + n] k[m] over the two spatial axes."""
    if _hw(a, axes) != _hw(k, axes):
        raise ShapeMismatch(f"spatial dims differ: {a.shape} vs {k.shape}")
    s = _hw(a, axes)
    out = sfft.irfft2(sfft.rfft2(a, axes=axes) * np.conj(sfft.rfft2(k, axes=axes)), s=s, axes=axes)
    return out.astype(_real_dtype(a, k), copy=False)


def centered_kernel(k: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """Pad a sensor-sized kernel and move its centre to the origin."""
    return sfft.ifftshift(pad_array(k, axes), axes=axes)


def kernel_spectrum(k: np.ndarray, axes=SPATIAL) -> np.ndarray:
    """Half-spectrum of the padded, origin-centred kernel. Reusable across calls."""
    return sfft.rfft2(centered_kernel(k, axes), axes=axes)


def forward_array(x: np.ndarray, k: np.ndarray | None = None, spectrum: np.ndarray | None = None,
                  axes=SPATIAL) -> np.ndarray:
    """crop(k * x) for padded ``x``; ``spectrum`` skips recomputing the kernel FFT."""
    if spectrum is None:
        kh, kw = _hw(k, axes)
        if (2 * kh, 2 * kw) != _hw(x, axes):
            raise ShapeMismatch(f"kernel {k.shape} does not match padded field {x.shape}")
        spectrum = kernel_spectrum(k, axes)
        dtype = _real_dtype(x, k)
    else:
        dtype = _real_dtype(x)
    full = sfft.irfft2(sfft.rfft2(x, axes=axes) * spectrum, s=_hw(x, axes), axes=axes)
    return crop_array(full, axes).astype(dtype, copy=False)


def adjoint_array(y: np.ndarray, k: np.ndarray | None = None, spectrum: np.ndarray | None = None,
                  axes=SPATIAL) -> np.ndarray:
    """pad(y) cross-correlated with the kernel; exact transpose of :func:`forward_array`."""
    if spectrum is None:
        if _hw(k, axes) != _hw(y, axes):
            raise ShapeMismatch(f"kernel {k.shape} does not match sensor field {y.shape}")
        spectrum = kernel_spectrum(k, axes)
        dtype = _real_dtype(y, k)
    else:
        dtype = _real_dtype(y)
    p = pad_array(y, axes)
    out = sfft.irfft2(sfft.rfft2(p, axes=axes) * np.conj(spectrum), s=_hw(p, axes), axes=axes)
    return out.astype(dtype, copy=False)


# ImageField API ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Psf:
    """A sensor-domain convolution kernel."""

    kernel: ImageField

    def __post_init__(self):
        self.kernel.require("sensor")

    @property
    def geometry(self) -> SensorGeometry:
        return self.kernel.geometry

    @property
    def total(self) -> float:
        return float(self.kernel.data.sum(dtype=np.float64))

    @classmethod
    def delta(cls, geometry: SensorGeometry, dtype=np.float32) -> "Psf":
        """Identity kernel (unit impulse at the sensor centre in every channel)."""
        k = np.zeros(geometry.shape, dtype=dtype)
        k[geometry.height // 2, geometry.width // 2, :] = 1.0
        return cls(ImageField(k))


def normalize_psf(kernel) -> Psf:
    """Scale a kernel so that all of its elements sum to one."""
    data = kernel.data if isinstance(kernel, ImageField) else np.asarray(kernel)
    total = data.sum(dtype=np.float64)
    if not total > 0:
        raise ValueError("cannot normalise a kernel with non-positive sum")
    return Psf(ImageField((data / total).astype(data.dtype)))


def _kernel_data(k) -> np.ndarray:
    if isinstance(k, Psf):
        return k.kernel.data
    if isinstance(k, ImageField):
        return k.require("sensor").data
    return np.asarray(k)


def pad(y: ImageField) -> ImageField:
    return ImageField(pad_array(y.require("sensor").data), "padded")


def crop(x: ImageField) -> ImageField:
    return ImageField(crop_array(x.require("padded").data), "sensor")


def _check_channels(a: ImageField, k: np.ndarray):
    if a.channels != k.shape[-1]:
        raise ShapeMismatch(f"channel count differs: field has {a.channels}, kernel has {k.shape[-1]}")


def circular_convolve(a: ImageField, k: ImageField) -> ImageField:
    a.require("padded"), k.require("padded")
    if a.shape != k.shape:
        raise ShapeMismatch(f"{a.shape} vs {k.shape}")
    return ImageField(circular_convolve_array(a.data, k.data), "padded")


def circular_correlate(a: ImageField, k: ImageField) -> ImageField:
    a.require("padded"), k.require("padded")
    if a.shape != k.shape:
        raise ShapeMismatch(f"{a.shape} vs {k.shape}")
    return ImageField(circular_correlate_array(a.data, k.data), "padded")


def forward(x: ImageField, k) -> ImageField:
    """Simulated sensor image of padded scene ``x`` through kernel ``k``."""
    kd = _kernel_data(k)
    x.require("padded")
    _check_channels(x, kd)
    return ImageField(forward_array(x.data, kd), "sensor")


def adjoint(y: ImageField, k) -> ImageField:
    """Back-projection of sensor image ``y`` into the padded domain."""
    kd = _kernel_data(k)
    y.require("sensor")
    _check_channels(y, kd)
    return ImageField(adjoint_array(y.data, kd), "padded")


def inner(a, b) -> float:
    a = a.data if isinstance(a, ImageField) else a
    b = b.data if isinstance(b, ImageField) else b
    return float(np.vdot(np.asarray(a, np.float64), np.asarray(b, np.float64)))
