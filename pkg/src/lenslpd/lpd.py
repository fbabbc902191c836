"""Unrolled learned primal-dual reconstruction with learnable kernel stacks.

The network keeps ``n`` primal banks (padded domain) and ``n`` dual banks
(sensor domain). Every bank has its own large kernel, initialised from the
measured PSF. Each unrolled iteration runs

    dual   <- dual + net_d(concat[dual, T(primal), b])
    primal <- primal + net_p(concat[primal, T'(dual)])

where ``T`` and ``T'`` are the cropped convolution and its adjoint, applied
bank by bank. ``net_d`` and ``net_p`` are two 3x3 conv layers with a leaky
rectifier between them, and every iteration has its own weights.

Two layouts are supported:

* ``per_channel``: ``n`` RGB kernels. Colour channels never mix. The update
  nets are shared across colours by folding the colour axis into the batch.
* ``mixed``: ``3n`` single-channel kernels. Bank ``3j + c`` starts from colour
  ``c`` of the PSF and the update nets see every map at once.

Internally both layouts share one representation. Kernels are stored as
``(nb, G, H, W)`` and state as ``(nb, B * G, ., .)``, where ``G`` is the
number of colour groups (``C`` for per_channel, 1 for mixed) and ``nb`` is the
number of banks per group.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import optics
from .core import ImageField, SensorGeometry
from .errors import GeometryMismatch, NonFiniteActivation, ShapeMismatch

VARIANTS = ("per_channel", "mixed")


@dataclass(frozen=True)
class LpdConfig:
    n_kernels: int = 5
    variant: str = "per_channel"
    unroll_iters: int = 10
    use_unet: bool = False
    geometry: SensorGeometry = SensorGeometry(64, 64, 3)
    hidden: int = 32
    unet_width: int = 48

    def __post_init__(self):
        if self.unroll_iters < 1:
            raise ValueError("unroll_iters must be >= 1")
        if self.n_kernels < 1:
            raise ValueError("n_kernels must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "mixed" and self.geometry.channels != 3:
            raise ValueError("the mixed variant needs 3-channel input")

    @property
    def groups(self) -> int:
        return self.geometry.channels if self.variant == "per_channel" else 1

    @property
    def channels_per_group(self) -> int:
        return self.geometry.channels // self.groups

    @property
    def banks(self) -> int:
        """Banks per colour group (= number of single maps the nets see)."""
        return self.n_kernels * self.channels_per_group

    @property
    def dual_in(self) -> int:
        return 2 * self.banks + self.channels_per_group

    @property
    def primal_in(self) -> int:
        return 2 * self.banks

    def to_text(self) -> str:
        g = self.geometry
        rows = {
            "n_kernels": self.n_kernels, "variant": self.variant, "unroll_iters": self.unroll_iters,
            "use_unet": int(self.use_unet), "height": g.height, "width": g.width, "channels": g.channels,
            "hidden": self.hidden, "unet_width": self.unet_width,
        }
        return "".join(f"{k}={v}\n" for k, v in rows.items())

    @classmethod
    def from_text(cls, text: str) -> "LpdConfig":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        geometry = SensorGeometry(int(kv["height"]), int(kv["width"]), int(kv["channels"]))
        return cls(int(kv["n_kernels"]), kv["variant"], int(kv["unroll_iters"]), bool(int(kv["use_unet"])),
                   geometry, int(kv.get("hidden", 32)), int(kv.get("unet_width", 48)))


@dataclass
class ConvPair:
    """conv3x3 -> leaky rectifier -> conv3x3."""

    w1: ad.ParamTensor
    b1: ad.ParamTensor
    w2: ad.ParamTensor
    b2: ad.ParamTensor

    def __call__(self, x: ad.Node) -> ad.Node:
        return ad.conv2d(ad.activation(ad.conv2d(x, self.w1, self.b1)), self.w2, self.b2)

    def tensors(self, prefix: str) -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _uniform_conv(rng, k, cin, cout, dtype, name) -> tuple[ad.ParamTensor, ad.ParamTensor]:
    bound = 1.0 / np.sqrt(k * k * cin)
    w = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype)
    return ad.ParamTensor(w, f"{name}.w"), ad.ParamTensor(np.zeros(cout, dtype), f"{name}.b")


def _conv_pair(rng, cin, hidden, cout, dtype) -> ConvPair:
    w1, b1 = _uniform_conv(rng, 3, cin, hidden, dtype, "l1")
    w2, b2 = _uniform_conv(rng, 3, hidden, cout, dtype, "l2")
    return ConvPair(w1, b1, w2, b2)


# U-Net ------------------------------------------------------------------------------

UNET_LAYERS = ("enc1", "enc2", "bott", "dec2", "dec1")


@dataclass
class UNetParams:
    """Three-level residual U-Net (widths w, 2w, 4w) with a zero-initialised head."""

    blocks: dict[str, ConvPair]
    head_w: ad.ParamTensor
    head_b: ad.ParamTensor

    def tensors(self, prefix="unet") -> dict:
        out = {}
        for name in UNET_LAYERS:
            out.update(self.blocks[name].tensors(f"{prefix}.{name}"))
        out[f"{prefix}.head.w"] = self.head_w
        out[f"{prefix}.head.b"] = self.head_b
        return out


def unet_init(channels: int, width: int, rng, dtype=np.float32) -> UNetParams:
    w = width
    blocks = {
        "enc1": _conv_pair(rng, channels, w, w, dtype),
        "enc2": _conv_pair(rng, w, 2 * w, 2 * w, dtype),
        "bott": _conv_pair(rng, 2 * w, 4 * w, 4 * w, dtype),
        "dec2": _conv_pair(rng, 6 * w, 2 * w, 2 * w, dtype),
        "dec1": _conv_pair(rng, 3 * w, w, w, dtype),
    }
    head_w = ad.ParamTensor(np.zeros((1, 1, w, channels), dtype), "head.w")
    head_b = ad.ParamTensor(np.zeros(channels, dtype), "head.b")
    return UNetParams(blocks, head_w, head_b)


def unet_forward(unet: UNetParams, x: ad.Node) -> ad.Node:
    """Residual U-Net on a ``(C, N, H, W)`` map; H and W must be divisible by 4."""
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeMismatch(f"U-Net input dims must be divisible by 4, got {x.shape[2:]}")
    act = ad.activation
    b = unet.blocks
    e1 = act(b["enc1"](x))
    e2 = act(b["enc2"](ad.downsample(e1)))
    bt = act(b["bott"](ad.downsample(e2)))
    d2 = act(b["dec2"](ad.concat([ad.upsample(bt), e2])))
    d1 = act(b["dec1"](ad.concat([ad.upsample(d2), e1])))
    return ad.add(x, ad.conv2d(d1, unet.head_w, unet.head_b))


def _unet_any_size(unet: UNetParams, x: ad.Node) -> ad.Node:
    ph, pw = (-x.shape[2]) % 4, (-x.shape[3]) % 4
    if not (ph or pw):
        return unet_forward(unet, x)
    y = unet_forward(unet, ad.pad(x, 0, ph, 0, pw))
    return ad.crop(y, 0, 0, x.shape[2], x.shape[3])


# parameters ------------------------------------------------------------------------------

@dataclass
class ModelParams:
    config: LpdConfig
    kernels: ad.ParamTensor  # (nb, G, H, W)
    dual_nets: list[ConvPair]
    primal_nets: list[ConvPair]
    unet: UNetParams | None = None

    def named_parameters(self) -> dict[str, ad.ParamTensor]:
        out = {"kernels": self.kernels}
        for i, (d, p) in enumerate(zip(self.dual_nets, self.primal_nets)):
            out.update(d.tensors(f"dual{i}"))
            out.update(p.tensors(f"primal{i}"))
        if self.unet is not None:
            out.update(self.unet.tensors())
        return out

    def parameter_count(self, include_unet: bool = True) -> int:
        return sum(p.value.size for name, p in self.named_parameters().items()
                   if include_unet or not name.startswith("unet."))

    def kernel_slices(self) -> list[np.ndarray]:
        """Kernels as a list of ``(H, W, channels_per_group)`` arrays, one per bank.

        For per_channel this is ``n`` RGB kernels; for mixed ``3n`` single maps.
        """
        cfg = self.config
        k = self.kernels.value
        if cfg.variant == "per_channel":
            return [k[j].transpose(1, 2, 0) for j in range(cfg.n_kernels)]
        return [k[m, 0][:, :, None] for m in range(cfg.banks)]

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = set(params) ^ set(arrays)
            raise ShapeMismatch(f"parameter names differ: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.value.shape:
                raise ShapeMismatch(f"{k}: {arrays[k].shape} vs {p.value.shape}")
            p.value = np.array(arrays[k], dtype=p.value.dtype)

    def save(self, directory) -> Path:
        directory = ad.save_params(self.named_parameters(), directory)
        (directory / "config.txt").write_text(self.config.to_text())
        return directory


def _psf_array(psf) -> np.ndarray:
    if isinstance(psf, optics.Psf):
        return psf.kernel.data
    if isinstance(psf, ImageField):
        return psf.data
    return np.asarray(psf)


def lpd_init(psf, cfg: LpdConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fresh parameters: every kernel is a copy of ``psf``, update nets are random."""
    k = _psf_array(psf)
    if k.shape != cfg.geometry.shape:
        raise GeometryMismatch(f"PSF shape {k.shape} does not match geometry {cfg.geometry.shape}")
    G, cpg, nb = cfg.groups, cfg.channels_per_group, cfg.banks
    H, W = cfg.geometry.height, cfg.geometry.width
    stack = np.empty((nb, G, H, W), dtype=dtype)
    for g in range(G):
        for m in range(nb):
            stack[m, g] = k[:, :, g * cpg + m % cpg]
    rng = np.random.default_rng(seed)
    dual_nets, primal_nets = [], []
    for _ in range(cfg.unroll_iters):
        dual_nets.append(_conv_pair(rng, cfg.dual_in, cfg.hidden, nb, dtype))
        primal_nets.append(_conv_pair(rng, cfg.primal_in, cfg.hidden, nb, dtype))
    unet = unet_init(cfg.geometry.channels, cfg.unet_width, rng, dtype) if cfg.use_unet else None
    params = ModelParams(cfg, ad.ParamTensor(stack, "kernels"), dual_nets, primal_nets, unet)
    for name, p in params.named_parameters().items():
        p.name = name
    return params


def load_model(directory, dtype=np.float32) -> ModelParams:
    directory = Path(directory)
    cfg = LpdConfig.from_text((directory / "config.txt").read_text())
    shell = lpd_init(np.zeros(cfg.geometry.shape, dtype), cfg, seed=0, dtype=dtype)
    shell.load_arrays(ad.load_params(directory))
    return shell


def zero_update_nets(params: ModelParams) -> ModelParams:
    """Zero every update-net weight and bias in place (the untrained back-projector)."""
    for net in params.dual_nets + params.primal_nets:
        for p in (net.w1, net.b1, net.w2, net.b2):
            p.value = np.zeros_like(p.value)
    return params


# forward pass ---------------------------------------------------------------------------------

@dataclass
class LpdState:
    primal: ad.Node  # (nb, B * G, 2H, 2W)
    dual: ad.Node  # (nb, B * G, H, W)
    iteration: int = 0


@dataclass
class _Context:
    params: ModelParams
    b: ad.Node  # (channels_per_group, B * G, H, W)
    spectrum: np.ndarray
    batch: int

    @property
    def kernels(self):
        return self.params.kernels


def to_group_layout(b: np.ndarray, cfg: LpdConfig) -> np.ndarray:
    """``(B, H, W, C)`` images -> ``(C / G, B * G, H, W)`` maps."""
    B, H, W, C = b.shape
    G = cfg.groups
    return np.ascontiguousarray(b.reshape(B, H, W, G, C // G).transpose(4, 0, 3, 1, 2)).reshape(C // G, B * G, H, W)


def _check_finite(node: ad.Node, what: str):
    if not np.isfinite(node.value).all():
        raise NonFiniteActivation(f"non-finite values in {what}")


def dual_update(state: LpdState, ctx: _Context, i: int) -> ad.Node:
    """New dual banks for iteration ``i`` (1-based)."""
    if state.iteration != i - 1:
        raise ValueError(f"dual_update({i}) on state at iteration {state.iteration}")
    net = ctx.params.dual_nets[i - 1]
    proj = ad.cropped_conv(state.primal, ctx.kernels, ctx.spectrum)
    out = ad.add(state.dual, net(ad.concat([state.dual, proj, ctx.b])))
    _check_finite(out, f"dual update {i}")
    return out


def primal_update(state: LpdState, ctx: _Context, i: int) -> ad.Node:
    """New primal banks for iteration ``i``; ``state.dual`` must already be updated."""
    net = ctx.params.primal_nets[i - 1]
    back = ad.padded_corr(state.dual, ctx.kernels, ctx.spectrum)
    out = ad.add(state.primal, net(ad.concat([state.primal, back])))
    _check_finite(out, f"primal update {i}")
    return out


def _as_batch(b, cfg: LpdConfig) -> np.ndarray:
    arr = b.require("sensor").data[None] if isinstance(b, ImageField) else np.asarray(b)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != cfg.geometry.shape:
        raise ShapeMismatch(f"measurement shape {arr.shape[1:]} does not match geometry {cfg.geometry.shape}")
    return arr


def lpd_forward(params: ModelParams, b, keep_intermediates: bool = False):
    """Run the unrolled iterations on a measurement (or a ``(B, H, W, C)`` batch).

    Returns ``(reconstruction, intermediates)``. ``reconstruction`` is a node
    holding the padded-domain estimate ``(C, B, 2H, 2W)`` read from the first
    bank. ``intermediates`` is a list of :class:`LpdState` (empty unless
    requested).
    """
    cfg = params.config
    dtype = params.kernels.dtype
    barr = _as_batch(b, cfg).astype(dtype, copy=False)
    B = barr.shape[0]
    bl = to_group_layout(barr, cfg)
    ctx = _Context(params, ad.constant(bl), ad.stack_spectrum(params.kernels.value), B)

    n_rep = cfg.banks // cfg.channels_per_group
    primal = ad.padded_corr(ad.constant(np.tile(bl, (n_rep, 1, 1, 1))), params.kernels, ctx.spectrum)
    dual = ad.constant(np.zeros((cfg.banks,) + bl.shape[1:], dtype=dtype))
    state = LpdState(primal, dual, 0)
    history = [state] if keep_intermediates else []
    for i in range(1, cfg.unroll_iters + 1):
        dual = dual_update(state, ctx, i)
        state = LpdState(state.primal, dual, i - 1)
        primal = primal_update(state, ctx, i)
        state = LpdState(primal, dual, i)
        if keep_intermediates:
            history.append(state)
    recon = ad.select_output(state.primal, cfg.groups, cfg.channels_per_group)
    return recon, history


def bank_image(state: LpdState, cfg: LpdConfig, bank: int = 0, domain: str = "primal") -> np.ndarray:
    """One bank of a state as ``(B, h, w, C)`` images, for inspection."""
    node = state.primal if domain == "primal" else state.dual
    cpg, G = cfg.channels_per_group, cfg.groups
    v = node.value[bank * cpg:(bank + 1) * cpg]
    _, BG, h, w = v.shape
    return v.reshape(cpg, BG // G, G, h, w).transpose(1, 3, 4, 2, 0).reshape(BG // G, h, w, G * cpg)


def model_output(params: ModelParams, b) -> ad.Node:
    """Final sensor-sized estimate: centre crop of the reconstruction, then the optional U-Net."""
    recon, _ = lpd_forward(params, b)
    out = ad.center_crop(recon)
    if params.unet is not None:
        out = _unet_any_size(params.unet, out)
    return out


def reconstruct(params: ModelParams, b: ImageField, padded: bool = False) -> ImageField:
    """Inference helper: measurement in, image out (no graph is recorded)."""
    with ad.no_grad():
        if padded:
            recon, _ = lpd_forward(params, b)
            return ImageField(ad.to_images(recon.value)[0], "padded")
        return ImageField(ad.to_images(model_output(params, b).value)[0], "sensor")

