"""Classical reconstruction: FISTA and ADMM for

    minimise  0.5 * ||crop(k * x) - b||^2 + lam * R(x)

with ``R`` either the l1 norm or anisotropic total variation, optionally
under ``x >= 0``. Both solvers run in float64 internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from . import optics
from .core import ImageField
from .errors import DivergenceDetected, NegativeThreshold, ShapeMismatch

REGULARIZERS = ("l1", "tv")
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    lam: float = 1e-4
    step_size: float | str = "auto"
    tolerance: float = 1e-6
    regularizer: str = "l1"
    nonneg: bool = True
    rho: float = 1.0
    power_iters: int = 50
    tv_inner_iters: int = 20

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.step_size != "auto" and not (isinstance(self.step_size, (int, float)) and self.step_size > 0):
            raise ValueError("step_size must be positive or 'auto'")
        if not self.rho > 0:
            raise ValueError("rho must be positive")


@dataclass
class SolveReport:
    iterations_run: int = 0
    objective_trace: list[float] = field(default_factory=list)  # best objective so far, per iteration
    raw_objective: list[float] = field(default_factory=list)  # objective of each iterate
    final_data_fidelity: float = float("nan")
    converged: bool = False
    primal_residual: float | None = None  # ADMM only: ||Hx - v|| / ||v||


# operators -------------------------------------------------------------------------------------


class CameraOperator:
    """Cropped convolution with a fixed kernel, cached in the frequency domain."""

    def __init__(self, k: np.ndarray):
        self.kernel = np.asarray(k, dtype=np.float64)
        self.spectrum = optics.kernel_spectrum(self.kernel)
        self.sensor_shape = self.kernel.shape
        h, w, c = self.kernel.shape
        self.padded_shape = (2 * h, 2 * w, c)

    def forward(self, x):
        return optics.forward_array(x, spectrum=self.spectrum)

    def adjoint(self, y):
        return optics.adjoint_array(y, spectrum=self.spectrum)

    def lipschitz(self, iters: int = 50, seed: int = 0) -> float:
        """Largest eigenvalue of T'T by power iteration."""
        v = np.random.default_rng(seed).standard_normal(self.padded_shape)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = self.adjoint(self.forward(v))
            lam = float(np.linalg.norm(w))
            if lam == 0:
                return 0.0
            v = w / lam
        return lam


def _operator(k) -> CameraOperator:
    return CameraOperator(optics._kernel_data(k))


def _measurement(b) -> np.ndarray:
    if isinstance(b, ImageField):
        b.require("sensor")
        return b.data.astype(np.float64)
    return np.asarray(b, dtype=np.float64)


def _check(op: CameraOperator, b: np.ndarray):
    if b.shape != op.sensor_shape:
        raise ShapeMismatch(f"measurement {b.shape} does not match kernel {op.sensor_shape}")


def data_fidelity(x, b, k) -> float:
    op = k if isinstance(k, CameraOperator) else _operator(k)
    r = op.forward(np.asarray(getattr(x, "data", x), np.float64)) - _measurement(b)
    return 0.5 * float(np.vdot(r, r))


def data_fidelity_grad(x, b, k):
    """Gradient of 0.5 * ||T x - b||^2, i.e. T'(T x - b)."""
    op = k if isinstance(k, CameraOperator) else _operator(k)
    bb = _measurement(b)
    _check(op, bb)
    xa = x.require("padded").data if isinstance(x, ImageField) else np.asarray(x)
    if xa.shape != op.padded_shape:
        raise ShapeMismatch(f"estimate {xa.shape} does not match padded shape {op.padded_shape}")
    g = op.adjoint(op.forward(xa.astype(np.float64)) - bb)
    return ImageField(g, "padded") if isinstance(x, ImageField) else g


def soft_threshold(v, t: float):
    """Elementwise sign(v) * max(|v| - t, 0)."""
    if t < 0:
        raise NegativeThreshold(f"threshold must be >= 0, got {t}")
    if isinstance(v, ImageField):
        return v.replace(soft_threshold(v.data, t))
    v = np.asarray(v)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _diff(x):
    """Forward differences with periodic boundary, stacked on a new last axis."""
    return np.stack([np.roll(x, -1, axis=0) - x, np.roll(x, -1, axis=1) - x], axis=-1)


def _diff_t(d):
    dy, dx = d[..., 0], d[..., 1]
    return (np.roll(dy, 1, axis=0) - dy) + (np.roll(dx, 1, axis=1) - dx)


def regularizer_value(x, kind: str) -> float:
    if kind == "l1":
        return float(np.abs(x).sum())
    return float(np.abs(_diff(x)).sum())


def _prox_tv(v, t: float, nonneg: bool, iters: int):
    """prox of t * TV (anisotropic) with optional x >= 0, by projected dual gradient."""
    if t == 0:
        return np.maximum(v, 0) if nonneg else v
    p = np.zeros(v.shape + (2,))
    q = p.copy()
    s = 1.0
    x = v
    for _ in range(iters):
        x = v - t * _diff_t(q)
        if nonneg:
            x = np.maximum(x, 0)
        p_new = np.clip(q + _diff(x) / (8.0 * t), -1.0, 1.0)
        s_new = (1 + np.sqrt(1 + 4 * s * s)) / 2
        q = p_new + ((s - 1) / s_new) * (p_new - p)
        p, s = p_new, s_new
    x = v - t * _diff_t(p)
    return np.maximum(x, 0) if nonneg else x


# FISTA ------------------------------------------------------------------------------------------------


def fista_solve(b, k, cfg: SolverConfig = SolverConfig(), x0=None):
    """Accelerated proximal gradient with adaptive restart; returns the best iterate."""
    op = _operator(k)
    bb = _measurement(b)
    _check(op, bb)
    report = SolveReport()
    if cfg.step_size == "auto":
        lip = op.lipschitz(cfg.power_iters)
        step = 1.0 / lip if lip > 0 else 1.0
    else:
        step = float(cfg.step_size)

    def objective(x, tx=None):
        r = (op.forward(x) if tx is None else tx) - bb
        return 0.5 * float(np.vdot(r, r)) + cfg.lam * regularizer_value(x, cfg.regularizer)

    def prox(v):
        if cfg.regularizer == "l1":
            out = soft_threshold(v, cfg.lam * step)
            return np.maximum(out, 0) if cfg.nonneg else out
        return _prox_tv(v, cfg.lam * step, cfg.nonneg, cfg.tv_inner_iters)

    x = np.zeros(op.padded_shape) if x0 is None else np.asarray(getattr(x0, "data", x0), np.float64)
    f_init = objective(x)
    best_x, best_f = x, f_init
    y, t, f_prev = x, 1.0, f_init
    for it in range(cfg.max_iters):
        x_new = prox(y - step * op.adjoint(op.forward(y) - bb))
        f = objective(x_new)
        if not np.isfinite(f) or f > DIVERGENCE_FACTOR * max(f_init, np.finfo(float).tiny):
            raise DivergenceDetected(f"objective {f:.3e} after {it + 1} iterations (initial {f_init:.3e})")
        if f > f_prev:
            # restart the momentum from the last iterate
            t, y = 1.0, x
            x_new = prox(x - step * op.adjoint(op.forward(x) - bb))
            f = objective(x_new)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
        report.raw_objective.append(f)
        if f < best_f:
            best_x, best_f = x, f
        report.objective_trace.append(best_f)
        report.iterations_run = it + 1
        change = abs(f_prev - f) / max(abs(f_prev), np.finfo(float).tiny)
        f_prev = f
        if change < cfg.tolerance or best_f == 0:
            report.converged = True
            break
    report.final_data_fidelity = data_fidelity(best_x, bb, op)
    return ImageField(best_x.astype(np.float32), "padded"), report


# ADMM ----------------------------------------------------------------------------------------------


def _diff_spectrum(shape2d) -> np.ndarray:
    """Eigenvalues of D'D for periodic forward differences, on the rfft grid."""
    h, w = shape2d
    wy = 2 * np.pi * np.arange(h)[:, None] / h
    wx = 2 * np.pi * np.arange(w // 2 + 1)[None, :] / w
    return (2 - 2 * np.cos(wy)) + (2 - 2 * np.cos(wx))


def admm_solve(b, k, cfg: SolverConfig = SolverConfig(max_iters=100, regularizer="tv")):
    """Three-way split ADMM.

    ``v = H x`` (uncropped convolution; the crop is handled pixel-wise in
    the v-update), ``u = D x`` (finite differences for TV, identity for l1)
    and ``w = x`` (non-negativity). The x-update is a closed-form
    frequency-domain solve.

    ``cfg.rho`` is the penalty on the ``v`` split. The ``u`` and ``w``
    penalties are ``cfg.rho`` times the mean of ``|K|^2`` over frequencies, so
    that all three splits pull on ``x`` with comparable strength whatever the
    spread of the kernel.
    """
    op = _operator(k)
    bb = _measurement(b)
    _check(op, bb)
    report = SolveReport()
    s = op.padded_shape[:2]
    axes = optics.SPATIAL
    K = op.spectrum
    K2 = np.abs(K) ** 2
    rv = cfg.rho
    ru = rw = cfg.rho * float(K2.mean()) if K2.mean() > 0 else cfg.rho
    tv = cfg.regularizer == "tv"
    D2 = _diff_spectrum(s)[:, :, None] if tv else np.ones_like(K2)
    denom = rv * K2 + ru * D2 + (rw if cfg.nonneg else 0.0)
    denom = np.where(denom == 0, 1.0, denom)

    def H(x):
        return sfft.irfft2(sfft.rfft2(x, axes=axes) * K, s=s, axes=axes)

    D = _diff if tv else (lambda z: z)
    Dt = _diff_t if tv else (lambda z: z)

    ctb = optics.pad_array(bb)
    mask = optics.pad_array(np.ones_like(bb))
    x = np.zeros(op.padded_shape)
    v = np.zeros_like(x)
    u = D(x)
    w = x.copy()
    eta_v, eta_u, eta_w = np.zeros_like(v), np.zeros_like(u), np.zeros_like(w)

    def objective(z):
        r = op.forward(z) - bb
        return 0.5 * float(np.vdot(r, r)) + cfg.lam * regularizer_value(z, cfg.regularizer)

    f_init = objective(x)
    f_prev = f_init
    hx = H(x)
    for it in range(cfg.max_iters):
        v = (ctb + rv * hx + eta_v) / (mask + rv)
        u = soft_threshold(D(x) + eta_u / ru, cfg.lam / ru)
        rhs = Dt(ru * u - eta_u)
        if cfg.nonneg:
            w = np.maximum(x + eta_w / rw, 0.0)
            rhs = rhs + rw * w - eta_w
        rhs_f = np.conj(K) * sfft.rfft2(rv * v - eta_v, axes=axes) + sfft.rfft2(rhs, axes=axes)
        x = sfft.irfft2(rhs_f / denom, s=s, axes=axes)
        hx = H(x)
        eta_v += rv * (hx - v)
        eta_u += ru * (D(x) - u)
        if cfg.nonneg:
            eta_w += rw * (x - w)
        est = np.maximum(x, 0.0) if cfg.nonneg else x
        f = objective(est)
        if not np.isfinite(f) or f > DIVERGENCE_FACTOR * max(f_init, np.finfo(float).tiny):
            raise DivergenceDetected(f"objective {f:.3e} after {it + 1} iterations (initial {f_init:.3e})")
        report.raw_objective.append(f)
        report.objective_trace.append(f)
        report.iterations_run = it + 1
        change = abs(f_prev - f) / max(abs(f_prev), np.finfo(float).tiny)
        f_prev = f
        if change < cfg.tolerance or f == 0:
            report.converged = True
            break
    est = np.maximum(x, 0.0) if cfg.nonneg else x
    nv = np.linalg.norm(v)
    report.primal_residual = float(np.linalg.norm(H(x) - v) / nv) if nv > 0 else 0.0
    report.final_data_fidelity = data_fidelity(est, bb, op)
    return ImageField(est.astype(np.float32), "padded"), report
