"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the reconstruction network needs exist. Each op builds
a :class:`Node` holding its value, its parents and a closure mapping the
upstream gradient to one gradient per parent. :func:`backward` walks the
graph once in reverse topological order and accumulates into
:class:`ParamTensor` leaves.

Feature maps are channel-first ``(C, N, H, W)`` inside the engine, so that
channel concatenation and the column copies of the convolutions move
contiguous blocks. Images enter and leave through :func:`from_images` and
:func:`to_images`. Convolution weights are ``(k, k, Cin, Cout)``.

Precision follows the inputs: float32 for training, float64 for gradient
checks.
"""
from __future__ import annotations

import contextlib
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import optics
from .core import read_array, write_array
from .errors import GraphCycle, NonScalarLoss, ShapeMismatch

OP_KINDS = (
    "constant",
    "param",
    "conv2d_small",
    "circ_conv_trainable_kernel",
    "crop",
    "pad",
    "concat_channels",
    "add",
    "scale",
    "activation",
    "mse_loss",
    "unet_block",
    "select",
)

LEAKY_SLOPE = 0.2

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op_kind", "value", "parents", "vjp", "grad", "requires_grad")

    def __init__(self, value, op_kind="constant", parents=(), vjp=None):
        self.op_kind = op_kind
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None
        self.requires_grad = vjp is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node({self.op_kind}, shape={np.shape(self.value)})"


class ParamTensor(Node):
    """Trainable leaf. ``grad`` accumulates across :func:`backward` calls."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name="", trainable=True):
        super().__init__(np.asarray(value), "param")
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(np.asarray(value))


def _node(value, op_kind, parents, vjp) -> Node:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, op_kind, parents, vjp)
    return Node(value, op_kind)


def _topological(root: Node) -> list[Node]:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycle(f"cycle through {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                if state.get(id(p)) == 1:
                    raise GraphCycle(f"cycle through {p!r}")
                if state.get(id(p)) is None:
                    stack.append((p, False))
    return order


def backward(loss: Node, retain_grads: bool = False) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`ParamTensor`.

    Intermediate nodes get ``.grad`` only when ``retain_grads`` is set.
    """
    if np.size(loss.value) != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {np.shape(loss.value)}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, ParamTensor):
            node.grad = node.grad + g
            continue
        if retain_grads:
            node.grad = g
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# elementwise and structural ops -------------------------------------------------

def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def scale(x: Node, s: float) -> Node:
    return _node(x.value * s, "scale", (x,), lambda g: (g * s,))


def activation(x: Node) -> Node:
    """Leaky rectifier with negative slope 0.2."""
    slope = x.dtype.type(LEAKY_SLOPE)
    out = x.value * slope
    np.maximum(out, x.value, out=out)
    return _node(out, "activation", (x,), lambda g: (np.where(x.value > 0, g, g * slope),))


def concat(nodes) -> Node:
    """Stack feature maps along the channel axis (axis 0)."""
    nodes = [constant(n) for n in nodes]
    splits = np.cumsum([n.shape[0] for n in nodes])[:-1]
    return _node(np.concatenate([n.value for n in nodes], axis=0), "concat_channels", nodes,
                 lambda g: tuple(np.split(g, splits, axis=0)))


def crop(x: Node, top: int, left: int, height: int, width: int) -> Node:
    """Spatial window of a ``(C, N, H, W)`` map."""
    H, W = x.shape[2], x.shape[3]
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ShapeMismatch(f"crop window out of bounds for {x.shape}")

    def vjp(g):
        out = np.zeros_like(x.value)
        out[:, :, top:top + height, left:left + width] = g
        return (out,)

    return _node(x.value[:, :, top:top + height, left:left + width], "crop", (x,), vjp)


def pad(x: Node, top: int, bottom: int, left: int, right: int) -> Node:
    C, N, H, W = x.shape
    out = np.zeros((C, N, H + top + bottom, W + left + right), dtype=x.dtype)
    out[:, :, top:top + H, left:left + W] = x.value
    return _node(out, "pad", (x,), lambda g: (g[:, :, top:top + H, left:left + W],))


def center_crop(x: Node) -> Node:
    """Sensor window of a padded ``(C, N, 2H, 2W)`` map."""
    h, w = x.shape[2] // 2, x.shape[3] // 2
    return crop(x, h // 2, w // 2, h, w)


def center_pad(y: Node) -> Node:
    h, w = y.shape[2], y.shape[3]
    return pad(y, h // 2, h - h // 2, w // 2, w - w // 2)


def select_output(x: Node, groups: int, channels: int) -> Node:
    """First ``channels`` maps of a ``(n, B * groups, H, W)`` state, regrouped.

    Returns ``(groups * channels, B, H, W)`` with output channel ``g * channels + c``
    taken from map ``c`` of group ``g``.
    """
    n, bg, H, W = x.shape
    B = bg // groups
    sel = x.value[:channels].reshape(channels, B, groups, H, W)
    out = sel.transpose(2, 0, 1, 3, 4).reshape(groups * channels, B, H, W)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:channels] = g.reshape(groups, channels, B, H, W).transpose(1, 2, 0, 3, 4).reshape(channels, bg, H, W)
        return (full,)

    return _node(out, "select", (x,), vjp)


def mse_loss(pred: Node, target) -> Node:
    """Mean over all elements of the squared difference."""
    target = target.value if isinstance(target, Node) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.value - target
    n = diff.size
    value = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=pred.dtype)
    return _node(value, "mse_loss", (pred,), lambda g: (diff * (2.0 * g / n).astype(pred.dtype),))


# learned small convolutions ------------------------------------------------------
#
# Maps are (C, N, H, W). The input is zero padded and flattened to (C, M) so
# that kernel tap (i, j) reads the contiguous slice starting at i * Wp + j.
# Outputs are computed on the padded grid and the valid (H, W) corner kept.
#
# Two equivalent evaluation orders are used, whichever moves less memory:
# * gather (Cout >= Cin): copy the nine shifted input slices into a column
#   matrix (9 Cin, L) and do one matmul;
# * scatter (Cout < Cin): multiply the unshifted input by all taps at once,
#   giving (9 Cout, M), then add the nine shifted output slices.

def _flat_padded(x: np.ndarray, p: int) -> np.ndarray:
    C, N, H, W = x.shape
    if p == 0:
        return x.reshape(C, -1)
    xp = np.zeros((C, N, H + 2 * p, W + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + H, p:p + W] = x
    return xp.reshape(C, -1)


def _offsets(k: int, Wp: int):
    return [(i * k + j, i * Wp + j) for i in range(k) for j in range(k)]


def _columns(flat: np.ndarray, k: int, Wp: int, L: int) -> np.ndarray:
    C = flat.shape[0]
    cols = np.empty((k * k * C, L), dtype=flat.dtype)
    for t, off in _offsets(k, Wp):
        cols[t * C:(t + 1) * C] = flat[:, off:off + L]
    return cols


def _tap_major(w: np.ndarray) -> np.ndarray:
    """(k, k, Cin, Cout) -> (k * k * Cout, Cin), rows ordered (tap, cout)."""
    k, _, cin, cout = w.shape
    return w.reshape(k * k, cin, cout).transpose(0, 2, 1).reshape(k * k * cout, cin)


class _ConvPlan:
    def __init__(self, x_shape, w_shape):
        C, N, H, W = x_shape
        k, k2, cin, cout = w_shape
        if k % 2 == 0 or k2 != k:
            raise ShapeMismatch(f"conv2d kernel must be odd and square, got {w_shape}")
        if cin != C:
            raise ShapeMismatch(f"conv2d: input has {C} channels, weights expect {cin}")
        self.C, self.N, self.H, self.W = C, N, H, W
        self.k, self.cout = k, cout
        self.p = k // 2
        self.Hp, self.Wp = H + 2 * self.p, W + 2 * self.p
        self.M = N * self.Hp * self.Wp
        self.L = self.M - (k - 1) * self.Wp - (k - 1)
        self.scatter = k > 1 and cout < cin

    def valid(self, full: np.ndarray, rows: int) -> np.ndarray:
        return full.reshape(rows, self.N, self.Hp, self.Wp)[:, :, :self.H, :self.W]

    def embed(self, g: np.ndarray) -> np.ndarray:
        """Place an (R, N, H, W) output gradient on the flat padded grid (R, M)."""
        full = np.zeros((g.shape[0], self.N, self.Hp, self.Wp), dtype=g.dtype)
        full[:, :, :self.H, :self.W] = g
        return full.reshape(g.shape[0], self.M)


def conv2d_values(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward convolution on raw arrays."""
    plan = _ConvPlan(x.shape, w.shape)
    k, cout, L, M = plan.k, plan.cout, plan.L, plan.M
    bias = b[:, None, None, None]
    if k == 1:
        return (w.reshape(-1, cout).T @ x.reshape(plan.C, -1)).reshape(cout, plan.N, plan.H, plan.W) + bias
    flat = _flat_padded(x, plan.p)
    full = np.zeros((cout, M), dtype=np.result_type(x, w))
    if plan.scatter:
        z = _tap_major(w) @ flat
        for t, off in _offsets(k, plan.Wp):
            full[:, :L] += z[t * cout:(t + 1) * cout, off:off + L]
    else:
        full[:, :L] = w.reshape(-1, cout).T @ _columns(flat, k, plan.Wp, L)
    return plan.valid(full, cout) + bias


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """Same-size learned convolution (cross-correlation form), odd square kernel."""
    plan = _ConvPlan(x.shape, w.shape)
    out = conv2d_values(x.value, w.value, b.value)
    k, C, cout, L, M, p = plan.k, plan.C, plan.cout, plan.L, plan.M, plan.p

    def vjp(g):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        if k == 1:
            g2 = g.reshape(cout, -1)
            if w.requires_grad:
                gw = (x.value.reshape(C, -1) @ g2.T).reshape(w.shape)
            if x.requires_grad:
                gx = (w.value.reshape(C, cout) @ g2).reshape(x.shape)
            return gx, gw, gb
        gflat = plan.embed(g)
        if plan.scatter:
            gz = np.zeros((k * k * cout, M), dtype=g.dtype)
            for t, off in _offsets(k, plan.Wp):
                gz[t * cout:(t + 1) * cout, off:off + L] = gflat[:, :L]
            if w.requires_grad:
                flat = _flat_padded(x.value, p)
                gwt = gz @ flat.T  # (k*k*cout, cin)
                gw = gwt.reshape(k * k, cout, C).transpose(0, 2, 1).reshape(w.shape)
            if x.requires_grad:
                gxp = _tap_major(w.value).T @ gz
                gx = gxp.reshape(C, plan.N, plan.Hp, plan.Wp)[:, :, p:p + plan.H, p:p + plan.W]
            return gx, gw, gb
        gl = gflat[:, :L]
        if w.requires_grad:
            cols = _columns(_flat_padded(x.value, p), k, plan.Wp, L)
            gw = (cols @ gl.T).reshape(w.shape)
            del cols
        if x.requires_grad:
            gcols = w.value.reshape(-1, cout) @ gl
            gxp = np.zeros((C, M), dtype=gcols.dtype)
            for t, off in _offsets(k, plan.Wp):
                gxp[:, off:off + L] += gcols[t * C:(t + 1) * C]
            gx = gxp.reshape(C, plan.N, plan.Hp, plan.Wp)[:, :, p:p + plan.H, p:p + plan.W]
        return gx, gw, gb

    return _node(out, "conv2d_small", (x, w, b), vjp)


# large trainable kernels -----------------------------------------------------------
#
# Kernel stacks are (n, G, H, W); fields are (n, B * G, ., .). Map m of group g
# uses kernel slice [m, g], shared across the B batch items.

FFT_AXES = (-2, -1)


def _grouped(x: np.ndarray, groups: int) -> np.ndarray:
    n, bg = x.shape[:2]
    return x.reshape((n, bg // groups, groups) + x.shape[2:])


def _kernel_grad(full_grad: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. the padded, origin-centred kernel back to sensor size."""
    summed = full_grad.sum(axis=1)
    return optics.crop_array(sfft.fftshift(summed, axes=FFT_AXES), FFT_AXES)


def stack_spectrum(kernel: np.ndarray) -> np.ndarray:
    """Spectrum of a ``(n, G, H, W)`` stack, shaped to broadcast over the batch axis."""
    return optics.kernel_spectrum(kernel, FFT_AXES)[:, None]


def cropped_conv(x: Node, kernel: Node, spectrum: np.ndarray | None = None) -> Node:
    """Forward camera model with a trainable kernel stack.

    ``kernel`` is ``(n, G, H, W)`` and ``x`` is ``(n, B * G, 2H, 2W)``; every map
    is convolved with its own kernel slice and cropped to ``(n, B * G, H, W)``.
    """
    n, G, h, w = kernel.shape
    if x.shape[0] != n or x.shape[1] % G or x.shape[2:] != (2 * h, 2 * w):
        raise ShapeMismatch(f"cropped_conv: field {x.shape} vs kernel {kernel.shape}")
    if spectrum is None:
        spectrum = stack_spectrum(kernel.value)
    xs = _grouped(x.value, G)
    out = optics.forward_array(xs, spectrum=spectrum, axes=FFT_AXES).reshape(n, x.shape[1], h, w)
    s = x.shape[2:]

    def vjp(g):
        gs = _grouped(g, G)
        gx = gk = None
        if x.requires_grad:
            gx = optics.adjoint_array(gs, spectrum=spectrum, axes=FFT_AXES).reshape(x.shape)
        if kernel.requires_grad:
            gp = sfft.rfft2(optics.pad_array(gs, FFT_AXES), axes=FFT_AXES)
            full = sfft.irfft2(gp * np.conj(sfft.rfft2(xs, axes=FFT_AXES)), s=s, axes=FFT_AXES)
            gk = _kernel_grad(full).astype(kernel.dtype)
        return gx, gk

    return _node(out, "circ_conv_trainable_kernel", (x, kernel), vjp)


def padded_corr(y: Node, kernel: Node, spectrum: np.ndarray | None = None) -> Node:
    """Adjoint camera model with a trainable kernel stack (twin of :func:`cropped_conv`)."""
    n, G, h, w = kernel.shape
    if y.shape[0] != n or y.shape[1] % G or y.shape[2:] != (h, w):
        raise ShapeMismatch(f"padded_corr: field {y.shape} vs kernel {kernel.shape}")
    if spectrum is None:
        spectrum = stack_spectrum(kernel.value)
    ys = _grouped(y.value, G)
    out = optics.adjoint_array(ys, spectrum=spectrum, axes=FFT_AXES).reshape(n, y.shape[1], 2 * h, 2 * w)
    s = (2 * h, 2 * w)

    def vjp(g):
        gs = _grouped(g, G)
        gy = gk = None
        if y.requires_grad:
            gy = optics.forward_array(gs, spectrum=spectrum, axes=FFT_AXES).reshape(y.shape)
        if kernel.requires_grad:
            pf = sfft.rfft2(optics.pad_array(ys, FFT_AXES), axes=FFT_AXES)
            full = sfft.irfft2(pf * np.conj(sfft.rfft2(gs, axes=FFT_AXES)), s=s, axes=FFT_AXES)
            gk = _kernel_grad(full).astype(kernel.dtype)
        return gy, gk

    return _node(out, "circ_conv_trainable_kernel", (y, kernel), vjp)


# U-Net resampling ---------------------------------------------------------------------

def downsample(x: Node) -> Node:
    """2x2 average pooling."""
    C, N, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"downsample needs even dims, got {x.shape}")
    out = x.value.reshape(C, N, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    quarter = x.dtype.type(0.25)
    return _node(out, "unet_block", (x,), lambda g: (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),))


def upsample(x: Node) -> Node:
    """Nearest-neighbour 2x upsampling."""
    C, N, H, W = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)
    return _node(out, "unet_block", (x,), lambda g: (g.reshape(C, N, H, 2, W, 2).sum(axis=(3, 5)),))


# layout helpers ---------------------------------------------------------------------------

def from_images(batch: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` images -> ``(C, N, H, W)`` maps."""
    return np.ascontiguousarray(np.moveaxis(batch, -1, 0))


def to_images(maps: np.ndarray) -> np.ndarray:
    """``(C, N, H, W)`` maps -> ``(N, H, W, C)`` images."""
    return np.ascontiguousarray(np.moveaxis(maps, 0, -1))


# checkpoints ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_params(params: dict, directory) -> Path:
    """One tensor file per parameter plus ``manifest.txt`` (name, file, dims)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, p) in enumerate(params.items()):
        fname = f"p{i:04d}.ltsr"
        write_array(p.value, directory / fname)
        lines.append(f"{name}\t{fname}\t{'x'.join(str(d) for d in p.value.shape)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname, dims = line.split("\t")
        arr = read_array(directory / fname)
        if "x".join(str(d) for d in arr.shape) != dims:
            raise ShapeMismatch(f"{fname}: manifest says {dims}, file holds {arr.shape}")
        out[name] = arr
    return out
