import numpy as np
import pytest

from stegcnn.data_pipeline import StegDataset, synthetic_images
from stegcnn.steg_model import NetworkConfig, build_model
from stegcnn.training import (
    AdamState,
    LossWeights,
    NonFiniteError,
    TrainingDiverged,
    adam_step,
    joint_loss,
    train,
    write_log_csv,
    xavier_init,
)
from oracles import joint_loss_loop


def _zero_params():
    params = build_model(NetworkConfig.desk(), seed=0)
    for a in params.arrays():
        a[...] = 0
    return params


def test_perfect_reconstruction_zero_weights_zero_loss(rng):
    host = rng.normal(size=(1, 3, 4, 4))
    guest = rng.normal(size=(1, 1, 4, 4))
    loss = joint_loss(host, guest, host.copy(), guest.copy(), _zero_params(), LossWeights())
    assert loss.total == 0.0


def test_regularizer_only():
    params = _zero_params()
    params.host[0].weights[0, 0, 0, 0] = 2.0
    x = np.zeros((1, 3, 2, 2))
    g = np.zeros((1, 1, 2, 2))
    loss = joint_loss(x, g, x + 1, g + 1, params, LossWeights(alpha=0, beta=0, lam=1e-4))
    assert loss.total == pytest.approx(0.0004, rel=1e-12)
    assert loss.encoder == loss.decoder == 0


def test_biases_not_regularized():
    params = _zero_params()
    params.decoder[0].bias[:] = 5.0
    z = np.zeros((1, 3, 2, 2))
    zg = np.zeros((1, 1, 2, 2))
    assert joint_loss(z, zg, z, zg, params, LossWeights()).total == 0.0


def test_joint_loss_matches_scalar_loop(rng):
    params = build_model(NetworkConfig.desk(), seed=9)
    host, hybrid = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 5, 5))
    guest, rec = rng.normal(size=(2, 1, 5, 5)), rng.normal(size=(2, 1, 5, 5))
    w = LossWeights(0.7, 1.3, 1e-3)
    got = joint_loss(host, guest, hybrid, rec, params, w).total
    want = joint_loss_loop(host, guest, hybrid, rec, [k.weights.astype(np.float64) for k in params.kernels()],
                           0.7, 1.3, 1e-3)
    assert abs(got - want) / want < 1e-6


def test_joint_loss_non_negative_and_shape_checked(rng):
    params = build_model(NetworkConfig.desk(), seed=9)
    a = rng.normal(size=(1, 3, 4, 4))
    g = rng.normal(size=(1, 1, 4, 4))
    assert joint_loss(a, g, a * 0.5, g * 2, params, LossWeights()).total >= 0
    with pytest.raises(ValueError):
        joint_loss(a, g, a[:, :1], g, params, LossWeights())


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


def test_xavier_bound_and_determinism():
    x = xavier_init(3, 3, 10_000, np.random.default_rng(0))
    assert x.min() >= -1 and x.max() <= 1
    np.testing.assert_array_equal(x, xavier_init(3, 3, 10_000, np.random.default_rng(0)))


def test_xavier_moments():
    a = np.sqrt(6 / 600)
    x = xavier_init(300, 300, 100_000, np.random.default_rng(1))
    assert abs(x.mean()) < 0.005
    assert abs(x.var() - a * a / 3) < 0.1 * a * a / 3


def test_xavier_rejects_bad_fans():
    with pytest.raises(ValueError):
        xavier_init(0, 3, 1, np.random.default_rng(0))


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    state = AdamState.fresh(p, lr=0.1)
    adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert state.t == 1


def test_adam_single_step_hand_computed():
    # m = 0.1, v = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps)
    p = [np.array([1.0])]
    state = AdamState.fresh(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(p, [np.array([1.0])], state)
    assert p[0][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p[0][0] == pytest.approx(0.9, abs=1e-8)


def test_adam_two_steps_against_recurrence():
    p = [np.array([0.5])]
    state = AdamState.fresh(p, lr=0.01)
    grads = [0.3, -0.7]
    m = v = 0.0
    want = 0.5
    for t, g in enumerate(grads, 1):
        adam_step(p, [np.array([g])], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p[0][0] == pytest.approx(want, abs=1e-14)


def test_adam_rejects_non_finite():
    p = [np.array([1.0])]
    state = AdamState.fresh(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan])], state)
    assert state.t == 0 and p[0][0] == 1.0


def test_adam_no_reconstruction_signal_no_lambda():
    params = build_model(NetworkConfig.desk(), seed=0)
    before = [a.copy() for a in params.arrays()]
    adam_step(params, params.zeros_like(), AdamState.fresh(params))
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), before))


@pytest.fixture(scope="module")
def tiny_data():
    return StegDataset.from_samples(synthetic_images(40, 8, seed=1))


def test_zero_epochs_returns_initial_model(tiny_data):
    cfg = NetworkConfig.desk(3, 4, 8, 8)
    ckpt = train(cfg, tiny_data, epochs=0, batch_size=4, seed=3)
    assert ckpt.log == [] and ckpt.epoch == 0
    fresh = build_model(cfg, 3)
    assert all(np.array_equal(a, b) for a, b in zip(ckpt.params.arrays(), fresh.arrays()))


def test_training_is_deterministic(tiny_data):
    cfg = NetworkConfig.desk(3, 4, 8, 8)
    a = train(cfg, tiny_data, epochs=2, batch_size=4, seed=11, lr=1e-3)
    b = train(cfg, tiny_data, epochs=2, batch_size=4, seed=11, lr=1e-3)
    assert [r.loss for r in a.log] == [r.loss for r in b.log]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert a.adam.t == 2 * (len(tiny_data) // 4)


def test_training_rejects_tiny_dataset(tiny_data):
    with pytest.raises(ValueError):
        train(NetworkConfig.desk(3, 4, 8, 8), tiny_data.subset(range(5)), epochs=1, batch_size=4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint(tiny_data):
    cfg = NetworkConfig.desk(3, 4, 8, 8)
    bad = StegDataset(tiny_data.covers.copy(), tiny_data.payloads.copy())
    bad.covers[:] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, bad, epochs=1, batch_size=4)
    assert info.value.checkpoint.config == cfg


def test_loss_halves_in_tiny_run():
    data = StegDataset.from_samples(synthetic_images(200, 16, seed=2))
    ckpt = train(NetworkConfig.desk(3, 8, 16, 16), data, epochs=20, batch_size=8, seed=0, lr=1e-3)
    assert len(ckpt.log) == 20
    assert ckpt.log[-1].loss < 0.5 * ckpt.log[0].loss


def test_log_csv(tmp_path, tiny_data):
    ckpt = train(NetworkConfig.desk(3, 4, 8, 8), tiny_data, epochs=2, batch_size=4, seed=0)
    path = tmp_path / "log.csv"
    write_log_csv(ckpt.log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,enc_psnr,dec_psnr"
    assert len(lines) == 3 and lines[1].startswith("1,")
