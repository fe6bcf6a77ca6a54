import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hivestate.cnn import (CnnArchitecture, EarlyStopping, NumericalError, TrainConfig,
                           backward, dropout_masks, forward, init_model, load_model,
                           loss, predict, rmsprop_step, save_model, train)
from hivestate.evaluation import auc
from hivestate.gradcheck import check_gradients, numeric_gradient

SHAPE = (30, 20)


@pytest.fixture(scope="module")
def model():
    return init_model(CnnArchitecture(), SHAPE, seed=0)


def test_layer_shapes():
    arch = CnnArchitecture()
    assert arch.layer_shapes(SHAPE) == [(1, 30, 20), (16, 15, 10), (16, 7, 5), (16, 3, 5), (16, 1, 5)]
    assert arch.flat_size(SHAPE) == 80
    m = init_model(arch, SHAPE)
    assert m.params["dense1_w"].shape == (80, 256)
    assert m.params["dense2_w"].shape == (256, 32)
    assert m.params["dense3_w"].shape == (32, 1)
    assert m.params["conv3_w"].shape == (16, 16, 3, 1)


def test_mel_input_shapes():
    assert CnnArchitecture().flat_size((30, 120)) == 16 * 1 * 30


def test_forward_scalar_and_range(model, rng):
    s = forward(model, rng.normal(size=SHAPE))
    assert isinstance(s, float) and 0 < s < 1
    batch = forward(model, rng.normal(size=(4, *SHAPE)))
    assert batch.shape == (4,) and np.all((batch > 0) & (batch < 1))


def test_forward_zero_weights(rng):
    m = init_model(CnnArchitecture(), SHAPE)
    for v in m.params.values():
        v[...] = 0.0
    assert forward(m, rng.normal(size=SHAPE)) == 0.5


def test_zero_input_depends_on_biases_only(rng):
    m = init_model(CnnArchitecture(), SHAPE, seed=4)
    for k, v in m.params.items():
        if k.endswith("_b"):
            v[...] = rng.normal(size=v.shape)
    ref = forward(m, np.zeros(SHAPE))
    # first-layer weights only ever multiply the (zero) input
    m.params["conv1_w"] = rng.normal(size=m.params["conv1_w"].shape)
    assert forward(m, 0.0 * rng.normal(size=SHAPE)) == ref


def test_shape_mismatch(model):
    with pytest.raises(ValueError):
        forward(model, np.zeros((30, 21)))


def test_loss_examples():
    assert loss(0.5, 1) == pytest.approx(math.log(2))
    assert loss(0.5, 0) == pytest.approx(math.log(2))
    assert loss(1 - 1e-12, 1) < 1e-6


@given(st.floats(0, 1))
def test_loss_symmetry_and_finite(s):
    assert loss(s, 1) == pytest.approx(loss(1 - s, 0), rel=1e-9, abs=1e-12)
    assert np.isfinite(loss(s, 1)) and np.isfinite(loss(s, 0))


def test_gradient_check_sampled(rng):
    m = init_model(CnnArchitecture(), SHAPE, seed=1)
    x = rng.normal(size=(3, *SHAPE))
    y = np.array([1.0, 0.0, 1.0])
    res = check_gradients(m, x, y, max_per_tensor=40, rng=rng)
    assert res.worst[1] < 1e-4, res.errors
    assert res.unresolved == 0


def test_gradient_check_steps_around_kinks():
    # this draw leaves one conv2 pre-activation ~3e-6 from zero, inside a 1e-5 probe
    r = np.random.default_rng(5)
    m = init_model(CnnArchitecture(), SHAPE, seed=5)
    x = r.normal(size=(3, *SHAPE))
    y = np.array([1.0, 0.0, 1.0])
    _, grads = backward(m, x, y)
    before = m.params["conv2_b"].copy()
    value, step = numeric_gradient(m, x, y, "conv2_b", 2)
    assert 0 < step < 1e-5
    assert value == pytest.approx(grads["conv2_b"][2], rel=1e-6)
    np.testing.assert_array_equal(m.params["conv2_b"], before)
    # a smooth entry keeps the default step
    value, step = numeric_gradient(m, x, y, "dense3_b", 0)
    assert step == 1e-5
    assert value == pytest.approx(grads["dense3_b"][0], rel=1e-7)


def test_saturated_output_has_zero_gradient(rng):
    m = init_model(CnnArchitecture(), SHAPE, seed=2)
    m.params["dense3_b"][...] = 100.0
    _, grads = backward(m, rng.normal(size=(2, *SHAPE)), [1.0, 1.0])
    assert all(not g.any() for g in grads.values())


def test_masked_unit_gets_no_gradient(rng):
    m = init_model(CnnArchitecture(), SHAPE, seed=3)
    x = rng.normal(size=(1, *SHAPE))
    masks = dropout_masks(m, 1, 0.5, rng)
    masks[1][0, :] = 2.0
    masks[1][0, 7] = 0.0  # dense-1 unit 7 never reaches dense 2
    _, grads = backward(m, x, [1.0], masks)
    assert not grads["dense2_w"][7].any()


def test_dropout_masks_are_inverted(rng, model):
    masks = dropout_masks(model, 2000, 0.5, rng)
    assert [mk.shape[1] for mk in masks] == [80, 256, 32]
    assert set(np.unique(masks[1])) <= {0.0, 2.0}
    assert masks[1].mean() == pytest.approx(1.0, abs=0.02)


def test_rmsprop_examples():
    p = {"w": np.array([0.5])}
    state = {}
    rmsprop_step(p, {"w": np.array([1.0])}, state)
    assert p["w"][0] - 0.5 == pytest.approx(-0.0031623, abs=1e-7)
    before = p["w"].copy()
    rmsprop_step(p, {"w": np.zeros(1)}, state)
    np.testing.assert_array_equal(p["w"], before)
    for g in (10.0, 1000.0):
        q = {"w": np.zeros(1)}
        s = {}
        for _ in range(200):
            q_prev = q["w"].copy()
            rmsprop_step(q, {"w": np.array([g])}, s)
        assert abs(q["w"][0] - q_prev[0]) == pytest.approx(1e-3, rel=1e-3)


def test_early_stopping_patience():
    stop = EarlyStopping(5)
    losses = [1.0] + [2.0] * 10
    for epoch, v in enumerate(losses, start=1):
        if stop.update(epoch, v):
            break
    assert epoch == 6 and stop.best_epoch == 1


def _blob_stacks(n, seed, noise_seed=None):
    r = np.random.default_rng(seed)
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)]
    # class means are per-band profiles held constant over time, like spectral stacks
    centers = np.repeat(r.normal(size=(2, 1, SHAPE[1])), SHAPE[0], axis=1)
    noise = np.random.default_rng(noise_seed) if noise_seed is not None else r
    x = centers[y.astype(int)] + 1.5 * noise.normal(size=(n, *SHAPE))
    return x, y


def test_train_on_blobs_and_determinism(tmp_path):
    xtr, ytr = _blob_stacks(200, 0)
    xva, yva = _blob_stacks(60, 0, noise_seed=11)
    cfg = TrainConfig(epochs=30, seed=3)
    m1, log = train((xtr, ytr), (xva, yva), CnnArchitecture(), cfg)
    assert auc(predict(m1, xva), yva.astype(int)) >= 0.95
    assert len(log.epochs) == len(log.val_loss) == len(log.train_loss)
    # returned weights are the best epoch's
    from hivestate.cnn import _eval_loss
    assert _eval_loss(m1, xva, yva) == pytest.approx(min(log.val_loss), rel=1e-12)
    assert log.best_epoch == int(np.argmin(log.val_loss)) + 1
    m2, _ = train((xtr, ytr), (xva, yva), CnnArchitecture(), cfg)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == len(log.epochs) + 1


def test_train_stops_on_patience():
    xtr, ytr = _blob_stacks(20, 1)
    # lr 0 keeps the validation loss flat, so only epoch 1 counts as an improvement
    _, log = train((xtr, ytr), (xtr, ytr), CnnArchitecture(), TrainConfig(lr=0.0, patience=5))
    assert log.epochs == [1, 2, 3, 4, 5, 6] and log.best_epoch == 1


def test_train_errors():
    x, y = _blob_stacks(10, 2)
    with pytest.raises(ValueError):
        train((x[:0], y[:0]), (x, y))
    with pytest.raises(NumericalError):
        train((np.full_like(x, np.nan), y), (x, y), cfg=TrainConfig(epochs=2))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_model_round_trip(tmp_path, model, rng):
    save_model(tmp_path / "m.hcnn", model)
    assert (tmp_path / "m.hcnn").read_bytes()[:4] == b"HCNN"
    back = load_model(tmp_path / "m.hcnn")
    assert back.arch == model.arch and back.input_shape == model.input_shape
    x = rng.normal(size=(3, *SHAPE))
    np.testing.assert_allclose(forward(back, x), forward(model, x), rtol=1e-5)
