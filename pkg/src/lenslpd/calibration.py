"""Calibration maths and a synthetic lensless-camera simulator.

* :func:`extract_psf` turns a point-source capture and a dark frame into a
  unit-sum kernel.
* :func:`estimate_homography` fits a projective map to point pairs (DLT on
  normalised coordinates, optional RANSAC) and :func:`warp_image` resamples
  an image through it.
* :func:`synth_psf`, :func:`simulate_capture` and :func:`build_dataset` make
  paired (measurement, ground truth) data at desk scale.

Point coordinates are ``(x, y) = (column, row)`` in pixels.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from PIL import Image
from scipy import ndimage

from . import optics
from .core import ImageField, SensorGeometry, import_image_8bit, read_tensor, write_tensor
from .errors import (
    AllZeroCapture,
    DataError,
    DegenerateConfiguration,
    EmptyDirectory,
    GeometryMismatch,
    ShapeMismatch,
    SingularHomography,
    TooFewPoints,
    UnreadableImage,
)

log = logging.getLogger(__name__)

# PSF extraction ---------------------------------------------------------------------------


def extract_psf(capture: ImageField, dark: ImageField, background_percentile: float = 1.0) -> optics.Psf:
    """Dark-subtract, clamp, remove the residual floor and normalise to unit sum."""
    capture.require("sensor"), dark.require("sensor")
    if capture.shape != dark.shape:
        raise ShapeMismatch(f"capture {capture.shape} vs dark {dark.shape}")
    sig = np.clip(capture.data.astype(np.float64) - dark.data, 0.0, None)
    floor = np.percentile(sig, background_percentile)
    sig = np.clip(sig - floor, 0.0, None)
    total = sig.sum()
    if not total > 0:
        raise AllZeroCapture("no signal above the background")
    return optics.Psf(ImageField((sig / total).astype(capture.data.dtype)))


# homographies -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map with ``matrix[2, 2] == 1``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.isfinite(m).all():
            raise SingularHomography(f"need a finite 3x3 matrix, got shape {m.shape}")
        if abs(m[2, 2]) < 1e-15 or abs(np.linalg.det(m / m[2, 2])) <= 1e-12:
            raise SingularHomography("homography is not invertible")
        m = m / m[2, 2]
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        h = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    centred = pts - pts.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    return s[0] == 0 or s[-1] <= tol * s[0]


def _triangle_areas(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Twice the area of every point triple in ``(..., 4, 2)`` samples, plus a length scale squared."""
    areas = []
    for i, j, k in combinations(range(pts.shape[-2]), 3):
        u, v = pts[..., j, :] - pts[..., i, :], pts[..., k, :] - pts[..., i, :]
        areas.append(np.abs(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]))
    spread = ((pts - pts.mean(axis=-2, keepdims=True)) ** 2).sum(axis=(-2, -1))
    return np.stack(areas, axis=-1), spread


def _degenerate_minimal(src: np.ndarray, dst: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """True where some three of the four points (in either set) are collinear."""
    bad = np.zeros(src.shape[:-2], dtype=bool)
    for p in (src, dst):
        areas, spread = _triangle_areas(p)
        bad |= (areas <= tol * spread[..., None]).any(axis=-1)
    return bad


def _normaliser(pts: np.ndarray) -> np.ndarray:
    """Hartley similarity (centroid to origin, mean distance sqrt 2) for ``(..., m, 2)`` points."""
    c = pts.mean(axis=-2)
    d = np.sqrt(((pts - c[..., None, :]) ** 2).sum(axis=-1)).mean(axis=-1)
    s = np.where(d > 0, np.sqrt(2.0) / np.where(d > 0, d, 1.0), 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = t[..., 1, 1] = s
    t[..., 0, 2], t[..., 1, 2] = -s * c[..., 0], -s * c[..., 1]
    t[..., 2, 2] = 1.0
    return t


def _dlt_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalised DLT for a stack of ``(T, m, 2)`` correspondences.

    Returns ``(T, 3, 3)`` matrices and a mask of the well-determined fits.
    """
    ts, td = _normaliser(src), _normaliser(dst)
    a = src @ ts[..., :2, :2].transpose(0, 2, 1) + ts[:, None, :2, 2]
    b = dst @ td[..., :2, :2].transpose(0, 2, 1) + td[:, None, :2, 2]
    x, y, u, v = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    rows = np.stack([r1, r2], axis=-2).reshape(len(src), -1, 9)
    _, s, vt = np.linalg.svd(rows)
    ok = s[:, 7] > 1e-12 * s[:, 0] if s.shape[1] >= 8 else np.zeros(len(src), dtype=bool)
    hn = vt[:, -1].reshape(-1, 3, 3)
    return np.linalg.inv(td) @ hn @ ts, ok


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    h, ok = _dlt_batch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateConfiguration("point configuration does not determine a homography")
    return h[0]


def _reprojection(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distances ``|h(src) - dst|`` for one ``(3, 3)`` map or a ``(T, 3, 3)`` stack."""
    p = np.c_[src, np.ones(len(src))] @ np.swapaxes(h, -1, -2)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        proj = p[..., :2] / p[..., 2:3]
        err = np.sqrt(((proj - dst) ** 2).sum(axis=-1))
    return np.where(np.isfinite(err), err, np.inf)


def estimate_homography(src_pts, dst_pts, use_ransac: bool = False, trials: int = 1000,
                        threshold: float = 2.0, seed: int = 0) -> Homography:
    """Projective map taking ``src_pts`` onto ``dst_pts``.

    With ``use_ransac`` the best of ``trials`` four-point fits (most points
    within ``threshold`` pixels) is refitted on its inliers.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ShapeMismatch(f"{len(src)} source points vs {len(dst)} destination points")
    n = len(src)
    if n >= 3 and (_collinear(src) or _collinear(dst)):
        raise DegenerateConfiguration("all points are collinear")
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    if n == 4 and _degenerate_minimal(src, dst):
        raise DegenerateConfiguration("three of the four points are collinear")
    if not use_ransac or n == 4:
        return Homography(_dlt(src, dst))

    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((trials, n)), axis=1)[:, :4]
    usable = ~_degenerate_minimal(src[samples], dst[samples])
    hs, ok = _dlt_batch(src[samples[usable]], dst[samples[usable]])
    hs = hs[ok]
    if not len(hs):
        raise DegenerateConfiguration("no consistent four-point sample found")
    inliers = _reprojection(hs, src, dst) < threshold
    best = inliers[np.argmax(inliers.sum(axis=1))]
    if best.sum() < 4:
        raise DegenerateConfiguration("no consistent four-point sample found")
    h = _dlt(src[best], dst[best])
    # one more pass: inliers of the refit model
    again = _reprojection(h, src, dst) < threshold
    if again.sum() >= best.sum():
        h = _dlt(src[again], dst[again])
    return Homography(h)


def corner_error(estimated: Homography, true: Homography, width: int, height: int) -> float:
    """Largest distance between where the two maps send the image corners."""
    corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)
    return float(np.sqrt(((estimated.apply(corners) - true.apply(corners)) ** 2).sum(axis=1)).max())


def warp_image(img: ImageField, h: Homography, out_shape: tuple[int, int] | None = None) -> ImageField:
    """Resample ``img`` so that ``out(h(p)) = img(p)``; outside samples are zero."""
    if not isinstance(h, Homography):
        h = Homography(h)
    rows, cols = out_shape or (img.height, img.width)
    inv = np.linalg.inv(h.matrix)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    p = np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    q = inv @ p
    with np.errstate(divide="ignore", invalid="ignore"):
        sx, sy = q[0] / q[2], q[1] / q[2]
    bad = ~(np.isfinite(sx) & np.isfinite(sy))
    sx[bad], sy[bad] = -10.0, -10.0
    out = np.empty((rows, cols, img.channels), dtype=img.data.dtype)
    for c in range(img.channels):
        out[:, :, c] = ndimage.map_coordinates(img.data[:, :, c], [sy, sx], order=1, mode="constant",
                                               cval=0.0).reshape(rows, cols)
    return img.replace(out)


# dot-grid registration target ------------------------------------------------------------


def dot_grid_points(height: int, width: int, n: int = 5, margin: float = 0.2) -> np.ndarray:
    """Centres ``(x, y)`` of an ``n x n`` grid of dots inside the frame."""
    ys = np.linspace(margin * (height - 1), (1 - margin) * (height - 1), n)
    xs = np.linspace(margin * (width - 1), (1 - margin) * (width - 1), n)
    return np.array([(x, y) for y in ys for x in xs])


def render_dots(height: int, width: int, points, sigma: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    img = np.zeros((height, width))
    for x, y in points:
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0, 1)


def locate_dots(img: np.ndarray, count: int, min_separation: int = 3) -> np.ndarray:
    """Sub-pixel ``(x, y)`` centres of the ``count`` brightest local maxima.

    Each peak is refined with a separable quadratic fit over its 3x3
    neighbourhood.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    peaks = (a == ndimage.maximum_filter(a, size=2 * min_separation + 1)) & (a > 0)
    peaks[[0, -1], :] = False
    peaks[:, [0, -1]] = False
    r, c = np.nonzero(peaks)
    order = np.argsort(a[r, c])[::-1][:count]
    pts = []
    for i, j in zip(r[order], c[order]):
        dx_den = a[i, j - 1] - 2 * a[i, j] + a[i, j + 1]
        dy_den = a[i - 1, j] - 2 * a[i, j] + a[i + 1, j]
        dx = 0.5 * (a[i, j - 1] - a[i, j + 1]) / dx_den if dx_den < 0 else 0.0
        dy = 0.5 * (a[i - 1, j] - a[i + 1, j]) / dy_den if dy_den < 0 else 0.0
        pts.append((j + dx, i + dy))
    return np.array(pts)


# synthetic PSFs ----------------------------------------------------------------------------


def _bandlimited_noise(shape, rng, cutoff: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    fy = sfft.fftfreq(shape[0])[:, None]
    fx = sfft.fftfreq(shape[1])[None, :]
    lowpass = np.exp(-(fx ** 2 + fy ** 2) / (2 * cutoff ** 2))
    f = np.real(sfft.ifft2(sfft.fft2(noise) * lowpass))
    return f / f.std()


def _caustic(geometry: SensorGeometry, rng, zoom: float = 1.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Bright thin curves along the zero crossings of a smooth random field."""
    H, W, C = geometry.shape
    # the field is drawn on a larger canvas so that zoomed copies stay inside it
    big = (2 * H, 2 * W)
    cutoff = 4.0 / min(H, W)
    field = _bandlimited_noise(big, rng, cutoff)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    radius = 0.45 * min(H, W)
    out = np.empty((H, W, C))
    for c in range(C):
        # slight per-colour magnification mimics dispersion
        z = zoom * (1.0 + 0.02 * (c - (C - 1) / 2))
        sy = (yy - cy) / z + big[0] / 2 + shift[0]
        sx = (xx - cx) / z + big[1] / 2 + shift[1]
        f = ndimage.map_coordinates(field, [sy, sx], order=1, mode="wrap")
        lines = np.exp(-(f / 0.15) ** 2)
        r = np.sqrt((yy - cy - shift[0]) ** 2 + (xx - cx - shift[1]) ** 2)
        aperture = 1.0 / (1.0 + np.exp((r - radius) / 1.5))
        # soft threshold removes the faint haze between the curves
        out[:, :, c] = np.clip(lines * aperture - 0.05, 0.0, None)
    return out / out.sum()


@dataclass(frozen=True, eq=False)
class TwoZonePsf:
    """Field-varying camera: ``zone_a`` acts on the left half of the scene, ``zone_b`` on the right.

    ``zone_a`` plays the role of the calibrated (measured) kernel.
    """

    zone_a: optics.Psf
    zone_b: optics.Psf

    @property
    def measured(self) -> optics.Psf:
        return self.zone_a

    @property
    def geometry(self) -> SensorGeometry:
        return self.zone_a.geometry


def synth_psf(geometry: SensorGeometry, seed: int = 0, kind: str = "caustic"):
    """Synthetic diffuser PSF. ``kind="two_zone"`` returns a :class:`TwoZonePsf`.

    The second zone's kernel is the same caustic seen through a slightly
    magnified and displaced field, as an off-axis aberration would give.
    """
    if kind == "caustic":
        return optics.Psf(ImageField(_caustic(geometry, np.random.default_rng(seed)).astype(np.float32)))
    if kind == "two_zone":
        a = _caustic(geometry, np.random.default_rng(seed))
        shift = (0.04 * geometry.height, 0.06 * geometry.width)
        b = _caustic(geometry, np.random.default_rng(seed), zoom=1.12, shift=shift)
        return TwoZonePsf(optics.Psf(ImageField(a.astype(np.float32))),
                          optics.Psf(ImageField(b.astype(np.float32))))
    raise ValueError(f"unknown PSF kind {kind!r}")


def support_fraction(psf: optics.Psf, level: float = 0.05) -> float:
    """Bounding-box area (relative to the sensor) of pixels above ``level`` x max."""
    k = psf.kernel.data.sum(axis=2)
    r, c = np.nonzero(k > level * k.max())
    return float((np.ptp(r) + 1) * (np.ptp(c) + 1) / k.size)


def peak_to_sidelobe(psf: optics.Psf, exclude: int = 3) -> float:
    """Autocorrelation peak over the largest value outside a small central disc."""
    k = psf.kernel.data.astype(np.float64).sum(axis=2)
    k = k - k.mean()
    p = np.zeros((2 * k.shape[0], 2 * k.shape[1]))
    p[:k.shape[0], :k.shape[1]] = k
    ac = sfft.fftshift(np.real(sfft.ifft2(np.abs(sfft.fft2(p)) ** 2)))
    cy, cx = k.shape
    yy, xx = np.ogrid[:ac.shape[0], :ac.shape[1]]
    side = ac[(yy - cy) ** 2 + (xx - cx) ** 2 > exclude ** 2]
    return float(ac[cy, cx] / side.max())


# simulation -------------------------------------------------------------------------------------


def zone_masks(padded_shape) -> tuple[np.ndarray, np.ndarray]:
    """Left/right halves of the padded scene, as ``(2H, 2W, 1)`` 0/1 masks."""
    h2, w2 = padded_shape[0], padded_shape[1]
    a = np.zeros((h2, w2, 1), dtype=np.float32)
    a[:, : w2 // 2] = 1.0
    return a, 1.0 - a


def simulate_capture(scene: ImageField, psf, noise_sigma: float = 0.0, rng=None) -> ImageField:
    """``forward(scene, psf)`` plus Gaussian noise, clamped below at zero.

    ``psf`` may be a :class:`TwoZonePsf`, in which case each half of the scene
    goes through its own kernel and the two sensor images add.
    """
    scene.require("padded")
    if isinstance(psf, TwoZonePsf):
        ma, mb = zone_masks(scene.shape)
        x = scene.data
        clean = optics.forward_array(x * ma, psf.zone_a.kernel.data) + optics.forward_array(x * mb, psf.zone_b.kernel.data)
    else:
        k = optics._kernel_data(psf)
        if (2 * k.shape[0], 2 * k.shape[1]) != scene.shape[:2] or k.shape[2] != scene.channels:
            raise ShapeMismatch(f"kernel {k.shape} does not match scene {scene.shape}")
        clean = optics.forward_array(scene.data, k)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        clean = clean + rng.normal(0.0, noise_sigma, clean.shape).astype(clean.dtype)
    return ImageField(np.clip(clean, 0.0, None), "sensor")


# procedural scenes -----------------------------------------------------------------------------


def procedural_scene(height: int, width: int, rng) -> np.ndarray:
    """RGB test scene in [0, 1]: a colour gradient with random ellipses and bars."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([height, width])[:, None, None]
    c0, c1 = rng.uniform(0, 0.6, 3), rng.uniform(0, 0.6, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / (np.ptp(t) + 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(rng.integers(3, 8)):
        colour = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.6:
            ry, rx = rng.uniform(0.05, 0.3, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            hy, hx = rng.uniform(0.03, 0.25, 2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img[mask] = colour
    img = ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0))
    return np.clip(img, 0, 1)


def write_scene_images(directory, count: int, size=(128, 128), seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        img = procedural_scene(size[0], size[1], rng)
        path = directory / f"scene_{i:05d}.png"
        Image.fromarray(np.floor(img * 255 + 0.5).astype(np.uint8)).save(path)
        paths.append(path)
    return paths


# datasets ------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    measurement: ImageField
    ground_truth: ImageField
    source_id: str
    split: str

    def __post_init__(self):
        if self.measurement.shape != self.ground_truth.shape:
            raise GeometryMismatch(f"{self.measurement.shape} vs {self.ground_truth.shape}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")


def letterbox(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Aspect-preserving resize into a ``rows x cols`` frame, centred, zero borders."""
    h, w = img.shape[:2]
    s = min(rows / h, cols / w)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    resized = np.stack([
        np.asarray(Image.fromarray(np.ascontiguousarray(img[:, :, c], dtype=np.float32)).resize((nw, nh), Image.BILINEAR))
        for c in range(img.shape[2])
    ], axis=2)
    out = np.zeros((rows, cols, img.shape[2]), dtype=np.float32)
    top, left = (rows - nh) // 2, (cols - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    return np.clip(out, 0.0, 1.0)


def _to_rgb(field: ImageField, channels: int) -> np.ndarray:
    data = field.data
    if data.shape[2] == channels:
        return data
    if channels == 3:
        return np.repeat(data, 3, axis=2)
    return data.mean(axis=2, keepdims=True)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def split_assignment(count: int, split_ratio: float, seed: int) -> list[str]:
    """Seeded shuffle; the first ``round(count * split_ratio)`` go to train."""
    n_train = int(round(count * split_ratio))
    order = np.random.default_rng(seed).permutation(count)
    split = ["test"] * count
    for i in order[:n_train]:
        split[i] = "train"
    return split


def make_record(scene: np.ndarray, psf, noise_sigma: float, rng, source_id: str, split: str) -> DatasetRecord:
    """Pair a padded scene's simulated capture with its central sensor crop."""
    field = ImageField(scene, "padded")
    meas = simulate_capture(field, psf, noise_sigma, rng)
    return DatasetRecord(meas, optics.crop(field), source_id, split)


def build_dataset(image_dir, psf, geometry: SensorGeometry, noise_sigma: float = 0.0,
                  split_ratio: float = 0.9, seed: int = 0) -> list[DatasetRecord]:
    """Simulate a paired dataset from every readable image in ``image_dir``.

    Record ``i`` draws its noise from ``default_rng([seed, i])`` so any single
    record can be regenerated on its own.
    """
    image_dir = Path(image_dir)
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if image_dir.is_dir() else []
    if not files:
        raise EmptyDirectory(f"no images in {image_dir}")
    scenes, sources, skipped = [], [], 0
    rows, cols, _ = geometry.padded_shape
    for path in files:
        try:
            img = import_image_8bit(path)
        except DataError as exc:
            skipped += 1
            log.warning("skipping %s: %s", path, exc)
            continue
        scenes.append(letterbox(_to_rgb(img, geometry.channels), rows, cols))
        sources.append(str(path))
    if not scenes:
        raise UnreadableImage(f"none of the {len(files)} images in {image_dir} could be read")
    if skipped:
        log.warning("%d unreadable images skipped", skipped)
    splits = split_assignment(len(scenes), split_ratio, seed)
    return [make_record(s, psf, noise_sigma, np.random.default_rng([seed, i]), src, sp)
            for i, (s, src, sp) in enumerate(zip(scenes, sources, splits))]


def synthetic_dataset(geometry: SensorGeometry, psf, count: int, noise_sigma: float = 0.0,
                      split_ratio: float = 1.0, seed: int = 0) -> list[DatasetRecord]:
    """Dataset straight from :func:`procedural_scene` (no image files needed)."""
    rows, cols, _ = geometry.padded_shape
    scene_rng = np.random.default_rng([seed, 10 ** 6])
    splits = split_assignment(count, split_ratio, seed)
    out = []
    for i in range(count):
        scene = procedural_scene(rows, cols, scene_rng).astype(np.float32)
        if geometry.channels == 1:
            scene = scene.mean(axis=2, keepdims=True)
        out.append(make_record(scene, psf, noise_sigma, np.random.default_rng([seed, i]), f"procedural:{i}", splits[i]))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(records, out_dir) -> Path:
    """``records/{train,test}/NNNNN_{meas,gt}.ltsr`` plus ``manifest.txt``."""
    out_dir = Path(out_dir)
    lines = []
    for i, rec in enumerate(records):
        d = out_dir / "records" / rec.split
        d.mkdir(parents=True, exist_ok=True)
        meas, gt = d / f"{i:05d}_meas.ltsr", d / f"{i:05d}_gt.ltsr"
        write_tensor(rec.measurement, meas)
        write_tensor(rec.ground_truth, gt)
        digest = hashlib.sha256(meas.read_bytes() + gt.read_bytes()).hexdigest()
        lines.append(f"{i:05d}\t{rec.split}\t{rec.source_id}\t{digest}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out_dir


def load_dataset(root, split: str | None = None) -> list[DatasetRecord]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise EmptyDirectory(f"{root} has no manifest.txt")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rid, sp, src, _ = line.split("\t")
        if split is not None and sp != split:
            continue
        d = root / "records" / sp
        out.append(DatasetRecord(read_tensor(d / f"{rid}_meas.ltsr"), read_tensor(d / f"{rid}_gt.ltsr"), src, sp))
    return out
