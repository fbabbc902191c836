import numpy as np
import pytest

from lenslpd import autodiff as ad
from lenslpd import lpd, optics
from lenslpd.core import ImageField, SensorGeometry
from lenslpd.errors import GeometryMismatch, ShapeMismatch

G16 = SensorGeometry(16, 16, 3)


def random_psf(g, seed=0):
    k = np.random.default_rng(seed).random(g.shape)
    return k / k.sum()


def model(variant="per_channel", n=1, iters=2, g=G16, seed=0, **kw):
    cfg = lpd.LpdConfig(n, variant, iters, geometry=g, **kw)
    return lpd.lpd_init(random_psf(g), cfg, seed, dtype=np.float64)


def ctx_for(params, b):
    bl = lpd.to_group_layout(b, params.config)
    return lpd._Context(params, ad.constant(bl), ad.stack_spectrum(params.kernels.value), b.shape[0])


def test_config_validation():
    for bad in (dict(unroll_iters=0), dict(n_kernels=0), dict(variant="rgb")):
        with pytest.raises(ValueError):
            lpd.LpdConfig(**bad)
    with pytest.raises(ValueError):
        lpd.LpdConfig(variant="mixed", geometry=SensorGeometry(8, 8, 1))
    cfg = lpd.LpdConfig(3, "mixed", 4, True, G16, hidden=8, unet_width=4)
    assert lpd.LpdConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("variant", lpd.VARIANTS)
def test_init_copies_psf(variant):
    p = model(variant, n=5)
    psf = random_psf(G16)
    slices = p.kernel_slices()
    if variant == "per_channel":
        assert len(slices) == 5
        assert all(np.abs(s - psf).max() == 0 for s in slices)
    else:
        assert len(slices) == 15
        assert all(np.abs(s[:, :, 0] - psf[:, :, m % 3]).max() == 0 for m, s in enumerate(slices))
    biases = [t for name, t in p.named_parameters().items() if name.endswith(".b1") or name.endswith(".b2")]
    assert all(not b.value.any() for b in biases)


def test_init_weights_fan_in_bounded():
    p = model(n=2, hidden=8)
    w = p.dual_nets[0].w1.value
    assert np.abs(w).max() <= 1 / np.sqrt(9 * w.shape[2])


def test_init_geometry_mismatch():
    with pytest.raises(GeometryMismatch):
        lpd.lpd_init(np.ones((8, 8, 3)), lpd.LpdConfig(geometry=G16))


def test_same_seed_same_params():
    a, b = model(n=2, seed=5).arrays(), model(n=2, seed=5).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = model(n=2, seed=6).arrays()
    assert not np.array_equal(a["dual0.w1"], c["dual0.w1"])


def test_kernel_count_64():
    p = lpd.lpd_init(np.ones((64, 64, 3)), lpd.LpdConfig(5, "per_channel"))
    assert p.kernels.value.size == 61_440


def test_variant_kernel_parity():
    g = SensorGeometry(32, 48, 3)
    a = lpd.lpd_init(np.ones(g.shape), lpd.LpdConfig(5, "per_channel", 1, geometry=g))
    b = lpd.lpd_init(np.ones(g.shape), lpd.LpdConfig(5, "mixed", 1, geometry=g))
    assert a.kernels.value.size == b.kernels.value.size == 5 * 32 * 48 * 3


def test_full_size_parameter_count():
    g = SensorGeometry(270, 480, 3)
    p = lpd.lpd_init(np.ones(g.shape, np.float32), lpd.LpdConfig(5, "per_channel", 10, geometry=g))
    total = p.parameter_count(include_unet=False)
    assert abs(total - 2.0e6) <= 0.2e6
    assert p.kernels.value.size == 5 * 388_800


def test_unet_identity_at_init_and_size(rng):
    unet = lpd.unet_init(3, 48, rng, np.float64)
    count = sum(t.value.size for t in unet.tensors().values())
    assert 1.0e6 <= count <= 1.8e6
    x = ad.constant(rng.random((3, 1, 16, 20)))
    assert np.array_equal(lpd.unet_forward(unet, x).value, x.value)
    with pytest.raises(ShapeMismatch):
        lpd.unet_forward(unet, ad.constant(np.zeros((3, 1, 10, 16))))


def test_unet_any_size_pads_and_crops(rng):
    unet = lpd.unet_init(3, 4, rng, np.float64)
    x = ad.constant(rng.random((3, 1, 10, 14)))
    assert lpd._unet_any_size(unet, x).shape == x.shape


@pytest.mark.parametrize("variant", lpd.VARIANTS)
def test_zero_net_updates_are_identity(variant, rng):
    p = lpd.zero_update_nets(model(variant, n=2))
    b = rng.random((2,) + G16.shape)
    ctx = ctx_for(p, b)
    nb, BG = p.config.banks, 2 * p.config.groups
    state = lpd.LpdState(ad.constant(rng.random((nb, BG, 32, 32))), ad.constant(rng.random((nb, BG, 16, 16))))
    dual = lpd.dual_update(state, ctx, 1)
    assert np.array_equal(dual.value, state.dual.value)
    primal = lpd.primal_update(lpd.LpdState(state.primal, dual, 0), ctx, 1)
    assert np.array_equal(primal.value, state.primal.value)


def test_dual_update_requires_previous_iteration(rng):
    p = model()
    b = rng.random((1,) + G16.shape)
    st = lpd.LpdState(ad.constant(np.zeros((1, 3, 32, 32))), ad.constant(np.zeros((1, 3, 16, 16))), 0)
    with pytest.raises(ValueError):
        lpd.dual_update(st, ctx_for(p, b), 2)


@pytest.mark.parametrize("variant,n", [("per_channel", 1), ("per_channel", 3), ("mixed", 1), ("mixed", 2)])
def test_channel_bookkeeping(variant, n):
    p = model(variant, n=n)
    C = 3
    # total maps seen per pixel: dual (2n+1)C in, nC out; primal 2nC in, nC out
    G = p.config.groups
    assert p.dual_nets[0].w1.shape[2] * G == (2 * n + 1) * C
    assert p.dual_nets[0].w2.shape[3] * G == n * C
    assert p.primal_nets[0].w1.shape[2] * G == 2 * n * C
    assert p.primal_nets[0].w2.shape[3] * G == n * C


@pytest.mark.parametrize("variant", lpd.VARIANTS)
def test_forward_shapes_and_history(variant, rng):
    p = model(variant, n=2, iters=3)
    b = rng.random((2,) + G16.shape)
    recon, hist = lpd.lpd_forward(p, b, keep_intermediates=True)
    assert recon.shape == (3, 2, 32, 32)
    assert [s.iteration for s in hist] == [0, 1, 2, 3]
    banks = {s.primal.shape[0] for s in hist} | {s.dual.shape[0] for s in hist}
    assert banks == {p.config.banks}
    assert all(np.isfinite(s.primal.value).all() and np.isfinite(s.dual.value).all() for s in hist)
    assert lpd.bank_image(hist[-1], p.config).shape == (2, 32, 32, 3)
    assert lpd.model_output(p, b).shape == (3, 2, 16, 16)


def test_measurement_shape_checked():
    with pytest.raises(ShapeMismatch):
        lpd.lpd_forward(model(), np.zeros((1, 8, 8, 3)))


@pytest.mark.parametrize("variant", lpd.VARIANTS)
def test_untrained_model_is_back_projection(variant, rng):
    p = lpd.zero_update_nets(model(variant, n=3, iters=4))
    b = rng.random(G16.shape)
    out = lpd.reconstruct(p, ImageField(b), padded=True)
    ref = optics.adjoint_array(b, random_psf(G16))
    assert out.domain == "padded"
    assert np.abs(out.data - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_zero_measurement_gives_zero():
    p = lpd.zero_update_nets(model(n=2))
    out = lpd.reconstruct(p, ImageField(np.zeros(G16.shape)))
    assert not out.data.any()


def test_delta_kernels_zero_nets_keep_init(rng):
    g = G16
    cfg = lpd.LpdConfig(2, "per_channel", 3, geometry=g)
    p = lpd.zero_update_nets(lpd.lpd_init(optics.Psf.delta(g).kernel.data, cfg, dtype=np.float64))
    b = rng.random((1,) + g.shape)
    _, hist = lpd.lpd_forward(p, b, keep_intermediates=True)
    assert all(np.array_equal(s.primal.value, hist[0].primal.value) for s in hist)


def test_forward_deterministic(rng):
    p = model(n=2)
    b = rng.random((1,) + G16.shape)
    assert np.array_equal(lpd.model_output(p, b).value, lpd.model_output(p, b).value)


def test_per_channel_batch_items_independent(rng):
    p = model(n=2)
    b = rng.random((3,) + G16.shape)
    whole = lpd.model_output(p, b).value
    alone = lpd.model_output(p, b[1:2]).value
    assert np.allclose(whole[:, 1:2], alone, atol=1e-12)


def test_all_states_finite_over_seeds():
    g = SensorGeometry(8, 8, 3)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        variant = lpd.VARIANTS[seed % 2]
        p = lpd.lpd_init(random_psf(g, seed), lpd.LpdConfig(2, variant, 3, geometry=g, hidden=8), seed)
        _, hist = lpd.lpd_forward(p, rng.random((1,) + g.shape).astype(np.float32), keep_intermediates=True)
        assert all(np.isfinite(s.primal.value).all() and np.isfinite(s.dual.value).all() for s in hist)


def test_save_and_load(tmp_path, rng):
    cfg = lpd.LpdConfig(2, "mixed", 2, True, G16, hidden=4, unet_width=4)
    p = lpd.lpd_init(random_psf(G16), cfg, 3)
    p.save(tmp_path / "m")
    q = lpd.load_model(tmp_path / "m")
    assert q.config == cfg
    a, b = p.arrays(), q.arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    with pytest.raises(ShapeMismatch):
        q.load_arrays({"kernels": a["kernels"]})


@pytest.mark.slow
def test_full_size_inference_under_five_seconds():
    import time

    g = SensorGeometry(270, 480, 3)
    p = lpd.lpd_init(np.ones(g.shape, np.float32), lpd.LpdConfig(5, "per_channel", 10, geometry=g))
    b = ImageField(np.random.default_rng(0).random(g.shape).astype(np.float32))
    start = time.perf_counter()
    lpd.reconstruct(p, b)
    seconds = time.perf_counter() - start
    assert seconds < 5.0, f"one 270x480 frame took {seconds:.1f} s"
