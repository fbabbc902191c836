import numpy as np
import pytest

from lenslpd import autodiff as ad
from lenslpd import calibration, lpd
from lenslpd import training as tr
from lenslpd.core import SensorGeometry
from lenslpd.errors import EmptyDataset, NonFiniteActivation, NonFiniteGradient, NonFiniteLoss

G8 = SensorGeometry(8, 8, 3)


def tiny_model(seed=0, variant="per_channel", dtype=np.float32):
    psf = calibration.synth_psf(G8, seed)
    cfg = lpd.LpdConfig(1, variant, 2, geometry=G8, hidden=4)
    return lpd.lpd_init(psf, cfg, seed, dtype=dtype)


def tiny_data(count=4, seed=0):
    return calibration.synthetic_dataset(G8, calibration.synth_psf(G8, seed), count, 0.01, seed=seed)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(learning_rate=0.0), dict(epochs=0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_mse_values():
    assert tr.mse_loss(np.zeros(4), np.zeros(4)) == 0.0
    assert tr.mse_loss([1.0, 3.0], [0.0, 0.0]) == 5.0


def test_adam_first_steps_match_hand_computation():
    p = ad.ParamTensor(np.array([1.0, -2.0, 0.5]), "w")
    state = tr.AdamState()
    g1 = np.array([0.5, -0.1, 0.0])
    tr.optimizer_step({"w": p}, {"w": g1}, state, 0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p.value, expected, atol=1e-12)
    g2 = np.array([0.2, 0.3, 1.0])
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    expected = expected - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    tr.optimizer_step({"w": p}, {"w": g2}, state, 0.1)
    assert np.allclose(p.value, expected, atol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = ad.ParamTensor(np.ones(2), "w")
    with pytest.raises(NonFiniteGradient):
        tr.optimizer_step({"w": p}, {"w": np.array([np.nan, 0.0])}, tr.AdamState(), 0.1)
    assert np.array_equal(p.value, np.ones(2))


def test_train_log_rules():
    log = tr.TrainLog()
    log.record(1, 0.5, 0.1)
    with pytest.raises(ValueError):
        log.record(1, 0.4, 0.1)
    with pytest.raises(NonFiniteLoss):
        log.record(2, float("nan"), 0.1)
    assert log.to_csv().splitlines()[1].startswith("loss,1,0.5")


def test_one_epoch_step_count():
    _, log = tr.fit(tiny_model(), tiny_data(4), tr.TrainConfig(epochs=1, batch_size=2), validation=[])
    assert log.steps == [1, 2]


def test_max_steps_and_callback_stop():
    data = tiny_data(4)
    _, log = tr.fit(tiny_model(), data, tr.TrainConfig(epochs=5, batch_size=1, max_steps=3), validation=[])
    assert len(log.steps) == 3
    _, log = tr.fit(tiny_model(), data, tr.TrainConfig(epochs=5, batch_size=1), validation=[],
                    callback=lambda step, _: step == 2)
    assert len(log.steps) == 2


def test_same_seed_same_losses():
    data = tiny_data(6)
    cfg = tr.TrainConfig(epochs=2, batch_size=2, seed=3)
    _, a = tr.fit(tiny_model(), data, cfg, validation=[])
    _, b = tr.fit(tiny_model(), data, cfg, validation=[])
    assert a.losses == b.losses
    _, c = tr.fit(tiny_model(), data, tr.TrainConfig(epochs=2, batch_size=2, seed=4), validation=[])
    assert c.losses != a.losses


def test_checkpoint_roundtrip_preserves_validation_loss(tmp_path):
    data = tiny_data(4)
    model, _ = tr.fit(tiny_model(), data, tr.TrainConfig(batch_size=2), validation=[])
    before = tr.validation_loss(model, data)
    model.save(tmp_path / "m")
    assert tr.validation_loss(lpd.load_model(tmp_path / "m"), data) == before


def test_batch_order_invariance():
    data = tiny_data(5)
    pairs = tr._pairs(data)
    model = tiny_model(dtype=np.float64)
    a = float(tr.batch_loss(model, pairs, [0, 1, 2, 3, 4]).value)
    b = float(tr.batch_loss(model, pairs, [3, 0, 4, 2, 1]).value)
    assert abs(a - b) <= 1e-12 * a


def test_small_step_lowers_loss():
    for seed in range(5):
        data = tiny_data(2, seed)
        pairs = tr._pairs(data)
        model = tiny_model(seed, dtype=np.float64)
        params = model.named_parameters()
        loss = tr.batch_loss(model, pairs, [0, 1])
        before = float(loss.value)
        ad.backward(loss)
        tr.optimizer_step(params, {k: p.grad for k, p in params.items()}, tr.AdamState(), 1e-5)
        assert float(tr.batch_loss(model, pairs, [0, 1]).value) < before


def test_training_reduces_loss():
    data = tiny_data(2)
    model = tiny_model()
    start = tr.validation_loss(model, data)
    tr.fit(model, data, tr.TrainConfig(epochs=30, batch_size=2, learning_rate=1e-3), validation=[])
    assert tr.validation_loss(model, data) < start


def test_non_finite_loss_restores_parameters():
    model = tiny_model()
    before = model.arrays()
    target = np.full(G8.shape, np.nan, np.float32)
    with pytest.raises(NonFiniteLoss) as info:
        tr.fit(model, [(np.zeros(G8.shape, np.float32), target)], tr.TrainConfig(), validation=[])
    assert info.value.checkpoint is None
    after = model.arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_non_finite_measurement_stops_in_forward_pass():
    meas = np.full(G8.shape, np.nan, np.float32)
    with pytest.raises(NonFiniteActivation):
        tr.fit(tiny_model(), [(meas, np.zeros(G8.shape, np.float32))], tr.TrainConfig(), validation=[])


def test_validation_keeps_best_and_writes_outputs(tmp_path):
    data = tiny_data(10)
    cfg = tr.TrainConfig(epochs=2, batch_size=3, checkpoint_every=2, validate_every=1, checkpoint_dir=str(tmp_path))
    model, log = tr.fit(tiny_model(), data, cfg)
    assert len(log.val_steps) == len(log.steps)
    train, val = tr.holdout_split(data, 0.1, 0)
    assert np.isclose(np.mean(tr.evaluate_psnr(model, val)), max(log.val_psnr))
    assert (tmp_path / "best" / "config.txt").exists()
    assert (tmp_path / "step_000002" / "manifest.txt").exists()
    assert (tmp_path / "train_log.csv").read_text().startswith("kind,step,value,seconds")


def test_holdout_split():
    items = list(range(20))
    train, val = tr.holdout_split(items, 0.1, 0)
    assert len(val) == 2 and sorted(train + val) == items
    assert tr.holdout_split(items, 0.1, 0) == (train, val)
    assert tr.holdout_split([1], 0.1) == ([1], [])


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        tr.fit(tiny_model(), [], tr.TrainConfig())


def test_frozen_parameters_do_not_move():
    model = tiny_model()
    model.kernels.trainable = False
    k = model.kernels.value.copy()
    tr.fit(model, tiny_data(2), tr.TrainConfig(batch_size=2), validation=[])
    assert np.array_equal(model.kernels.value, k)
