import numpy as np
import pytest

from lenslpd import autodiff as ad
from lenslpd import lpd, optics
from lenslpd.core import SensorGeometry
from lenslpd.errors import GraphCycle, NonScalarLoss, ShapeMismatch

SEEDS = range(20)


def P(arr, name="p"):
    return ad.ParamTensor(np.array(arr, dtype=np.float64), name)


def fd_check(build, params, rng, samples=6, step=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``build()`` must return a scalar node. A few random entries of every
    parameter are perturbed.
    """
    for p in params:
        p.zero_grad()
    ad.backward(build())
    num, ana = [], []
    for p in params:
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, min(samples, flat.size), replace=False):
            h = step * max(1.0, abs(flat[i]))
            old = flat[i]
            flat[i] = old + h
            fp = float(build().value)
            flat[i] = old - h
            fm = float(build().value)
            flat[i] = old
            num.append((fp - fm) / (2 * h))
            ana.append(p.grad.reshape(-1)[i])
    num, ana = np.array(num), np.array(ana)
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-30)


def loss_of(node, target):
    return ad.mse_loss(node, target)


# one builder per op kind ----------------------------------------------------------------

def case_conv2d(rng):
    x, w, b = P(rng.standard_normal((3, 2, 6, 5))), P(rng.standard_normal((3, 3, 3, 4))), P(rng.standard_normal(4))
    t = rng.standard_normal((4, 2, 6, 5))
    return (lambda: loss_of(ad.conv2d(x, w, b), t)), [x, w, b]


def case_conv2d_narrowing(rng):
    x, w, b = P(rng.standard_normal((6, 2, 5, 7))), P(rng.standard_normal((3, 3, 6, 2))), P(rng.standard_normal(2))
    t = rng.standard_normal((2, 2, 5, 7))
    return (lambda: loss_of(ad.conv2d(x, w, b), t)), [x, w, b]


def case_cropped_conv(rng):
    x, k = P(rng.standard_normal((2, 6, 16, 16))), P(rng.standard_normal((2, 3, 8, 8)))
    t = rng.standard_normal((2, 6, 8, 8))
    return (lambda: loss_of(ad.cropped_conv(x, k), t)), [x, k]


def case_padded_corr(rng):
    y, k = P(rng.standard_normal((2, 2, 8, 8))), P(rng.standard_normal((2, 1, 8, 8)))
    t = rng.standard_normal((2, 2, 16, 16))
    return (lambda: loss_of(ad.padded_corr(y, k), t)), [y, k]


def case_crop(rng):
    x = P(rng.standard_normal((2, 1, 8, 8)))
    t = rng.standard_normal((2, 1, 3, 5))
    return (lambda: loss_of(ad.crop(x, 2, 1, 3, 5), t)), [x]


def case_pad(rng):
    x = P(rng.standard_normal((2, 1, 4, 4)))
    t = rng.standard_normal((2, 1, 7, 9))
    return (lambda: loss_of(ad.pad(x, 1, 2, 3, 2), t)), [x]


def case_concat(rng):
    a, b = P(rng.standard_normal((2, 1, 4, 4))), P(rng.standard_normal((3, 1, 4, 4)))
    t = rng.standard_normal((5, 1, 4, 4))
    return (lambda: loss_of(ad.concat([a, b]), t)), [a, b]


def case_add_scale(rng):
    a, b = P(rng.standard_normal((2, 1, 4, 4))), P(rng.standard_normal((2, 1, 4, 4)))
    t = rng.standard_normal((2, 1, 4, 4))
    return (lambda: loss_of(ad.scale(ad.add(a, b), -1.7), t)), [a, b]


def case_activation(rng):
    v = rng.standard_normal((2, 1, 5, 5))
    v = np.where(np.abs(v) < 1e-2, 0.5, v)
    x = P(v)
    t = rng.standard_normal((2, 1, 5, 5))
    return (lambda: loss_of(ad.activation(x), t)), [x]


def case_mse(rng):
    x = P(rng.standard_normal((3, 2, 4, 4)))
    t = rng.standard_normal((3, 2, 4, 4))
    return (lambda: ad.mse_loss(x, t)), [x]


def case_resample(rng):
    x = P(rng.standard_normal((2, 1, 8, 8)))
    t = rng.standard_normal((2, 1, 8, 8))
    return (lambda: loss_of(ad.upsample(ad.downsample(x)), t)), [x]


def case_select(rng):
    x = P(rng.standard_normal((3, 6, 4, 4)))
    t = rng.standard_normal((6, 2, 4, 4))
    return (lambda: loss_of(ad.select_output(x, 3, 2), t)), [x]


CASES = [case_conv2d, case_conv2d_narrowing, case_cropped_conv, case_padded_corr, case_crop, case_pad,
         case_concat, case_add_scale, case_activation, case_mse, case_resample, case_select]


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
def test_op_gradients_match_finite_differences(case):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        build, params = case(rng)
        worst = max(worst, fd_check(build, params, rng))
    assert worst < 1e-3


def test_unet_block_gradient_spot_check():
    rng = np.random.default_rng(0)
    unet = lpd.unet_init(3, 4, rng, np.float64)
    unet.head_w.value = rng.standard_normal(unet.head_w.shape) * 0.1
    x = P(rng.standard_normal((3, 1, 16, 16)))
    t = rng.standard_normal((3, 1, 16, 16))
    params = [x, unet.blocks["enc1"].w1, unet.blocks["bott"].w2, unet.head_w]
    err = fd_check(lambda: ad.mse_loss(lpd.unet_forward(unet, x), t), params, rng, samples=8)
    assert err < 1e-3


# analytic cases ---------------------------------------------------------------------------------

def test_half_squared_norm_gradient():
    x = P(np.arange(6.0).reshape(1, 1, 2, 3))
    loss = ad.scale(ad.mse_loss(x, np.zeros(x.shape)), x.value.size / 2)
    ad.backward(loss)
    assert np.allclose(x.grad, x.value)


def test_backward_accumulates():
    x = P(np.arange(4.0).reshape(1, 1, 2, 2))
    loss = ad.mse_loss(x, np.zeros(x.shape))
    ad.backward(loss)
    once = x.grad.copy()
    ad.backward(loss)
    assert np.array_equal(x.grad, 2 * once)


def test_identity_and_constant_convs(rng):
    x = rng.standard_normal((3, 2, 5, 5))
    eye = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(ad.conv2d_values(x, eye, np.zeros(3)), x)
    out = ad.conv2d_values(x, np.zeros((3, 3, 3, 2)), np.array([0.5, -2.0]))
    assert np.all(out[0] == 0.5) and np.all(out[1] == -2.0)


def test_conv_matches_direct_sum(rng):
    for cin, cout in ((3, 5), (6, 2)):
        x, w, b = rng.standard_normal((cin, 2, 5, 6)), rng.standard_normal((3, 3, cin, cout)), rng.standard_normal(cout)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((cout, 2, 5, 6)) + b[:, None, None, None]
        for i in range(3):
            for j in range(3):
                ref += np.einsum("cnhw,cd->dnhw", xp[:, :, i:i + 5, j:j + 6], w[i, j])
        assert np.abs(ad.conv2d_values(x, w, b) - ref).max() < 1e-10


def test_activation_values():
    out = ad.activation(ad.constant(np.array([1.0, -1.0, 0.0])))
    assert np.allclose(out.value, [1.0, -0.2, 0.0])


def test_conv_rejects_wrong_channels(rng):
    with pytest.raises(ShapeMismatch):
        ad.conv2d(P(rng.standard_normal((2, 1, 4, 4))), P(rng.standard_normal((3, 3, 3, 1))), P(np.zeros(1)))


def test_trainable_conv_forward_and_input_vjp_match_optics(rng):
    x = P(rng.standard_normal((1, 3, 16, 16)))
    k = P(rng.standard_normal((1, 3, 8, 8)))
    out = ad.cropped_conv(x, k)
    ref = optics.forward_array(ad.to_images(x.value)[0], ad.to_images(k.value)[0])
    assert np.allclose(ad.to_images(out.value)[0], ref, atol=1e-12)
    g = rng.standard_normal(out.shape)
    gx, _ = out.vjp(g)
    assert np.allclose(ad.to_images(gx)[0], optics.adjoint_array(ad.to_images(g)[0], ad.to_images(k.value)[0]),
                       atol=1e-12)
    gx, gk = out.vjp(np.zeros_like(g))
    assert not gx.any() and not gk.any()


def test_trainable_conv_shape_checks(rng):
    with pytest.raises(ShapeMismatch):
        ad.cropped_conv(P(np.zeros((1, 1, 12, 16))), P(np.zeros((1, 1, 8, 8))))
    with pytest.raises(ShapeMismatch):
        ad.padded_corr(P(np.zeros((2, 1, 8, 8))), P(np.zeros((1, 1, 8, 8))))


# linear ops are adjoint to their vector-Jacobian products ----------------------------------------

def linear_ops(rng):
    k = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((3, 3, 4, 3))
    yield "conv2d", (4, 2, 6, 6), lambda x: ad.conv2d(x, ad.constant(w), ad.constant(np.zeros(3)))
    yield "cropped_conv", (2, 3, 16, 16), lambda x: ad.cropped_conv(x, ad.constant(k))
    yield "cropped_conv_kernel", (2, 3, 8, 8), lambda kk: ad.cropped_conv(ad.constant(rng.standard_normal((2, 3, 16, 16))), kk)
    yield "padded_corr", (2, 6, 8, 8), lambda y: ad.padded_corr(y, ad.constant(k))
    yield "crop", (2, 1, 8, 8), lambda x: ad.crop(x, 1, 2, 5, 4)
    yield "pad", (2, 1, 4, 4), lambda x: ad.pad(x, 1, 0, 2, 3)
    yield "concat", (2, 1, 4, 4), lambda x: ad.concat([x, ad.scale(x, 2.0)])
    yield "scale", (2, 1, 4, 4), lambda x: ad.scale(x, 0.3)
    yield "select", (3, 6, 4, 4), lambda x: ad.select_output(x, 3, 2)
    yield "downsample", (2, 1, 8, 8), ad.downsample
    yield "upsample", (2, 1, 4, 4), ad.upsample


def test_linear_ops_adjoint_consistency():
    rng = np.random.default_rng(7)
    for name, shape, op in linear_ops(rng):
        x = P(rng.standard_normal(shape))
        out = op(x)
        y = rng.standard_normal(out.shape)
        # d/d(out) of this mse is exactly y, so backward yields L^T y
        x.zero_grad()
        ad.backward(ad.mse_loss(out, out.value - y * out.value.size / 2))
        lhs, rhs = np.vdot(out.value, y), np.vdot(x.value, x.grad)
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1e-12), name


# graph mechanics ------------------------------------------------------------------------------------

def test_non_scalar_loss():
    x = P(np.ones((1, 1, 2, 2)))
    with pytest.raises(NonScalarLoss):
        ad.backward(ad.scale(x, 2.0))


def test_cycle_detected():
    x = P(np.ones((1, 1, 2, 2)))
    a = ad.scale(x, 2.0)
    b = ad.scale(a, 3.0)
    a.parents = (b,)
    with pytest.raises(GraphCycle):
        ad.backward(ad.mse_loss(b, np.zeros(b.shape)))


def test_no_grad_records_nothing():
    x = P(np.ones((1, 1, 2, 2)))
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad and y.parents == ()


def test_shared_subgraph_visited_once():
    x = P(np.full((1, 1, 1, 1), 3.0))
    y = ad.scale(x, 2.0)
    z = ad.add(y, y)  # loss = (4x)^2
    ad.backward(ad.mse_loss(z, np.zeros(z.shape)))
    assert np.allclose(x.grad, 32 * 3.0)


def test_deterministic_gradients():
    def run():
        rng = np.random.default_rng(3)
        build, params = case_conv2d(rng)
        ad.backward(build())
        return [p.grad.copy() for p in params], float(build().value)

    (g1, l1), (g2, l2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a": P(rng.standard_normal((3, 3, 2, 4))), "b.c": P(rng.standard_normal(5))}
    ad.save_params(params, tmp_path)
    back = ad.load_params(tmp_path)
    assert set(back) == {"a", "b.c"}
    assert np.array_equal(back["a"], params["a"].value.astype(np.float32))
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert lines[0].split("\t") == ["a", "p0000.ltsr", "3x3x2x4"]


# end-to-end ------------------------------------------------------------------------------------------

def lpd_case(variant, seed):
    g = SensorGeometry(8, 8, 3)
    rng = np.random.default_rng(seed)
    psf = rng.random(g.shape)
    psf /= psf.sum()
    cfg = lpd.LpdConfig(1, variant, 2, False, g, hidden=4)
    model = lpd.lpd_init(psf, cfg, seed, dtype=np.float64)
    b = rng.random((2,) + g.shape)
    t = ad.from_images(rng.random((2,) + g.shape))
    return model, (lambda: ad.mse_loss(lpd.model_output(model, b), t))


@pytest.mark.parametrize("variant", lpd.VARIANTS)
def test_end_to_end_lpd_gradients(variant):
    worst = 0.0
    for seed in SEEDS:
        model, build = lpd_case(variant, seed)
        params = [model.kernels, model.dual_nets[0].w1, model.primal_nets[1].w2, model.dual_nets[1].b2]
        worst = max(worst, fd_check(build, params, np.random.default_rng(seed), samples=4))
    assert worst < 1e-3
