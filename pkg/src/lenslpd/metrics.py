"""Image-quality metrics and per-run reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageField, read_tensor
from .errors import CountMismatch, ImageTooSmall, MissingPair, ShapeMismatch

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, ImageField) else a, dtype=np.float64)


def psnr(pred, target, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for identical inputs."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ShapeMismatch(f"psnr: {p.shape} vs {t.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((p - t) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse)))


def _gray(a: np.ndarray) -> np.ndarray:
    return a.mean(axis=2) if a.ndim == 3 else a


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully-covered 11x11 Gaussian windows.

    RGB inputs are reduced to grayscale by the channel mean first.
    """
    p, t = _gray(_arr(pred)), _gray(_arr(target))
    if p.shape != t.shape:
        raise ShapeMismatch(f"ssim: {p.shape} vs {t.shape}")
    if min(p.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim needs at least {SSIM_WINDOW} px per side, got {p.shape}")
    w = _gaussian_window()

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[SSIM_WINDOW // 2:a.shape[0] - SSIM_WINDOW // 2,
                                                         SSIM_WINDOW // 2:a.shape[1] - SSIM_WINDOW // 2]

    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mp, mt = filt(p), filt(t)
    vp = filt(p * p) - mp ** 2
    vt = filt(t * t) - mt ** 2
    cov = filt(p * t) - mp * mt
    s = ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp ** 2 + mt ** 2 + c1) * (vp + vt + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


@dataclass
class MetricReport:
    method: str = "unknown"
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    runtime_ms: float | None = None

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def add(self, ident: str, pred, target):
        self.ids.append(ident)
        self.psnr.append(psnr(pred, target))
        self.ssim.append(ssim(pred, target))

    @staticmethod
    def _fmt_psnr(v: float) -> str:
        return "identical" if v >= PSNR_CAP else f"{v:.3f}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim"])
        for i, p, s in zip(self.ids, self.psnr, self.ssim):
            w.writerow([i, f"{p:.6f}", f"{s:.6f}"])
        w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"method: {self.method}",
                 "evaluated on the central sensor-sized crop; SSIM is reported in place of a perceptual metric",
                 f"{'id':<24}{'PSNR (dB)':>12}{'SSIM':>10}"]
        for i, p, s in zip(self.ids, self.psnr, self.ssim):
            lines.append(f"{i:<24}{self._fmt_psnr(p):>12}{s:>10.4f}")
        lines.append(f"{'mean (' + str(self.count) + ')':<24}{self._fmt_psnr(self.mean_psnr):>12}{self.mean_ssim:>10.4f}")
        if self.runtime_ms is not None:
            lines.append(f"runtime per frame: {self.runtime_ms:.1f} ms")
        return "\n".join(lines) + "\n"


def _tensor_files(directory: Path) -> dict[str, Path]:
    # measurements stored beside ground truth in a dataset folder are not scored
    files = [p for p in sorted(directory.glob("*.ltsr")) if not p.stem.endswith("_meas")]
    return {p.stem.removesuffix("_gt").removesuffix("_recon"): p for p in files}


def evaluate_run(recon_dir, gt_dir, method: str = "unknown") -> MetricReport:
    """Pair tensor files by id (file stem, ignoring ``_recon``/``_gt`` suffixes) and score them.

    ``*_meas`` files are skipped, so ``gt_dir`` may be a dataset records folder.
    """
    recon, gt = _tensor_files(Path(recon_dir)), _tensor_files(Path(gt_dir))
    if len(recon) != len(gt):
        raise CountMismatch(f"{len(recon)} reconstructions vs {len(gt)} ground-truth files")
    if not recon:
        raise MissingPair("no tensor files to evaluate")
    report = MetricReport(method)
    for ident, path in recon.items():
        if ident not in gt:
            raise MissingPair(f"no ground truth for {ident}")
        report.add(ident, read_tensor(path).data, read_tensor(gt[ident]).data)
    return report


def write_report(report: MetricReport, path) -> None:
    path = Path(path)
    path.write_text(report.to_text())
    path.with_suffix(".csv").write_text(report.to_csv())
