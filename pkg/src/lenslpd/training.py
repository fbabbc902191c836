"""Supervised training of the unrolled network (mean squared error, Adam)."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import lpd
from .errors import EmptyDataset, NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .metrics import psnr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    deterministic: bool = True
    max_steps: int | None = None
    validate_every: int | None = None  # steps; None means once per epoch
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_psnr: list[float] = field(default_factory=list)

    def record(self, step: int, loss: float, seconds: float):
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss} at step {step}")
        if self.steps and step <= self.steps[-1]:
            raise ValueError("step indices must increase")
        self.steps.append(step)
        self.losses.append(loss)
        self.seconds.append(seconds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "step", "value", "seconds"])
        for s, l, t in zip(self.steps, self.losses, self.seconds):
            w.writerow(["loss", s, repr(l), f"{t:.4f}"])
        for s, p in zip(self.val_steps, self.val_psnr):
            w.writerow(["val_psnr", s, repr(p), ""])
        return buf.getvalue()


# mean squared error --------------------------------------------------------------------


def mse_loss(pred, target) -> float:
    """Mean of the squared difference (plain arrays; see ``autodiff.mse_loss`` for graphs)."""
    p, t = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"mse: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


# Adam --------------------------------------------------------------------------------------

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of ``params[name].value`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if not getattr(p, "trainable", True):
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (lr / c1) * m / (np.sqrt(v / c2) + EPS)
        p.value = (p.value - step).astype(p.value.dtype, copy=False)


# data handling -------------------------------------------------------------------------------


def _pairs(dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for item in dataset:
        if hasattr(item, "measurement"):
            out.append((item.measurement.data, item.ground_truth.data))
        else:
            meas, gt = item
            out.append((getattr(meas, "data", meas), getattr(gt, "data", gt)))
    return out


def _batch(pairs, idx, dtype):
    b = np.stack([pairs[i][0] for i in idx]).astype(dtype, copy=False)
    t = ad.from_images(np.stack([pairs[i][1] for i in idx]).astype(dtype, copy=False))
    return b, t


def batch_loss(model: lpd.ModelParams, pairs, idx) -> ad.Node:
    b, t = _batch(pairs, idx, model.kernels.dtype)
    return ad.mse_loss(lpd.model_output(model, b), t)


def evaluate_psnr(model: lpd.ModelParams, dataset, batch_size: int = 4) -> list[float]:
    """Per-pair PSNR of the model output (central crop, after the optional U-Net)."""
    pairs = _pairs(dataset)
    scores = []
    with ad.no_grad():
        for s in range(0, len(pairs), batch_size):
            idx = list(range(s, min(s + batch_size, len(pairs))))
            b, _ = _batch(pairs, idx, model.kernels.dtype)
            out = ad.to_images(lpd.model_output(model, b).value)
            scores.extend(psnr(o, pairs[i][1]) for o, i in zip(out, idx))
    return scores


def validation_loss(model: lpd.ModelParams, dataset, batch_size: int = 4) -> float:
    """Mean squared error over a dataset, accumulated in float64 pair by pair order."""
    pairs = _pairs(dataset)
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(pairs), batch_size):
            idx = list(range(s, min(s + batch_size, len(pairs))))
            b, t = _batch(pairs, idx, model.kernels.dtype)
            out = lpd.model_output(model, b).value
            total += float(np.sum((out.astype(np.float64) - t) ** 2))
            count += out.size
    return total / count


def holdout_split(dataset, fraction: float = 0.1, seed: int = 0):
    """Seeded split of ``dataset`` into (train, validation); validation keeps at least one item."""
    items = list(dataset)
    n_val = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(items))
    val = [items[i] for i in sorted(order[:n_val])]
    train = [items[i] for i in sorted(order[n_val:])]
    return train, val


# fitting ---------------------------------------------------------------------------------------------


def fit(model: lpd.ModelParams, dataset, cfg: TrainConfig, validation=None,
        callback: Callable[[int, TrainLog], bool] | None = None):
    """Minimise the mean squared error of ``model`` over ``dataset``.

    ``validation`` selects the model kept at the end: by default 10 % of
    ``dataset`` is held out; pass a list of pairs to use those instead, or an
    empty list to skip validation and keep the final parameters.
    ``callback(step, log)`` runs after every optimizer step and may return
    True to stop early.

    Returns ``(model, log)``; ``model`` is updated in place and holds the
    best-validation parameters on return.
    """
    items = list(dataset)
    if not items:
        raise EmptyDataset("training set is empty")
    if validation is None:
        items, validation = holdout_split(items, 0.1, cfg.seed)
    train = _pairs(items)
    if not train:
        raise EmptyDataset("nothing left to train on after the validation split")
    params = model.named_parameters()
    trainable = {k: p for k, p in params.items() if p.trainable}
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    last_good = model.arrays()
    last_ckpt = None
    best = (-np.inf, None)
    step = 0

    def validate():
        nonlocal best
        if not validation:
            return
        score = float(np.mean(evaluate_psnr(model, validation, cfg.batch_size)))
        tlog.val_steps.append(step)
        tlog.val_psnr.append(score)
        if score > best[0]:
            best = (score, model.arrays())

    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            model.zero_grad()
            loss = batch_loss(model, train, order[s:s + cfg.batch_size])
            value = float(loss.value)
            if not np.isfinite(value):
                model.load_arrays(last_good)
                raise NonFiniteLoss(f"non-finite loss at step {step + 1}", checkpoint=last_ckpt)
            ad.backward(loss)
            try:
                optimizer_step(trainable, {k: p.grad for k, p in trainable.items()}, state, cfg.learning_rate)
            except NonFiniteGradient:
                model.load_arrays(last_good)
                raise
            step += 1
            tlog.record(step, value, time.perf_counter() - t0)
            last_good = model.arrays()
            if ckpt_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_ckpt = model.save(ckpt_dir / f"step_{step:06d}")
            if cfg.validate_every and step % cfg.validate_every == 0:
                validate()
            if callback is not None and callback(step, tlog):
                done = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
            if done:
                break
        if not cfg.validate_every or done:
            if not tlog.val_steps or tlog.val_steps[-1] != step:
                validate()
        if done:
            break
    if best[1] is not None:
        model.load_arrays(best[1])
    if ckpt_dir is not None:
        model.save(ckpt_dir / "best")
        (ckpt_dir / "train_log.csv").write_text(tlog.to_csv())
    return model, tlog
