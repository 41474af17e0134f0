from dataclasses import replace

import numpy as np
import pytest

from pdrlab.errors import ConfigError, MalformedStreamError, SpecError
from pdrlab.neuralnet import (
    ModelCheckpoint,
    NetworkSpec,
    TrainConfig,
    WindowEncoding,
    WindowSet,
    encode_windows,
    load_checkpoint,
    mc_dropout_predict,
    predict_trajectory,
    predict_windows,
    save_checkpoint,
    train,
)
from pdrlab.neuralnet.inference import mc_dropout

TOY_ENC = WindowEncoding(channels=("p_radio",), n_w=10, f_s=10.0)


def cv_windows(n, seed):
    """Constant-velocity 2D tracks; the target is the next point after the window."""
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(-1, 1, (n, 1, 2))
    v = rng.uniform(-0.1, 0.1, (n, 1, 2))
    steps = np.arange(11)[None, :, None]
    track = p0 + v * steps
    X = np.concatenate([track[:, :10], np.ones((n, 10, 1))], axis=2)
    Y = track[:, 10]
    zeros = np.zeros((n, 2))
    ticks = np.arange(n)
    return WindowSet(X, Y, zeros, ticks, ticks, ticks.astype(float))


def toy_spec(dropout=0.0, cells=16):
    return NetworkSpec(input_dim=3, ff_in_dims=(16,), lstm_cells=cells, dropout_rate=dropout)


@pytest.fixture(scope="module")
def toy_fit():
    tr, va = cv_windows(2000, 0), cv_windows(400, 1)
    cfg = TrainConfig(lr=5e-3, batch=64, max_epochs=50, patience=50, lr_halve_every=20, l2_weight=0.0)
    return train(tr, toy_spec(), cfg, encoding=TOY_ENC, validation=va), va


def test_toy_task_converges(toy_fit):
    res, va = toy_fit
    assert len(res.history) <= 50
    mse = np.mean(np.sum((predict_windows(res.checkpoint, va.X) - va.Y) ** 2, axis=1))
    assert mse < 1e-3


def test_best_validation_is_non_increasing(toy_fit):
    best = [h.best_val for h in toy_fit[0].history]
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_patience_zero_stops_after_first_bad_epoch():
    tr, va = cv_windows(200, 0), cv_windows(50, 1)
    # a huge step size makes the first epoch worse than the initial weights
    cfg = TrainConfig(lr=5.0, batch=16, max_epochs=10, patience=0, grad_clip=100.0)
    res = train(tr, toy_spec(), cfg, encoding=TOY_ENC, validation=va)
    assert res.history[0].val_loss >= res.history[0].best_val
    assert len(res.history) == 1
    assert res.stopped_early


def test_identical_seeds_give_identical_checkpoints():
    tr = cv_windows(300, 0)
    cfg = TrainConfig(batch=32, max_epochs=3, seed=5)
    a = train(tr, toy_spec(dropout=0.5), cfg, encoding=TOY_ENC).checkpoint
    b = train(tr, toy_spec(dropout=0.5), cfg, encoding=TOY_ENC).checkpoint
    assert a.to_bytes() == b.to_bytes()
    c = train(tr, toy_spec(dropout=0.5), TrainConfig(batch=32, max_epochs=3, seed=6), encoding=TOY_ENC).checkpoint
    assert c.digest() != a.digest()


def test_normalization_is_part_of_the_function():
    tr, va = cv_windows(300, 0), cv_windows(60, 1)
    cfg = TrainConfig(batch=32, max_epochs=3)
    ref = train(tr, toy_spec(), cfg, encoding=TOY_ENC, validation=va).checkpoint
    pre = lambda w: w.replace(X=(w.X - ref.x_mean) / ref.x_std, Y=(w.Y - ref.y_mean) / ref.y_std)
    raw_cfg = TrainConfig(batch=32, max_epochs=3, normalize_inputs=False, normalize_targets=False)
    other = train(pre(tr), toy_spec(), raw_cfg, encoding=TOY_ENC, validation=pre(va)).checkpoint
    assert np.array_equal(ref.theta, other.theta)
    y_ref = predict_windows(ref, va.X)
    y_other = predict_windows(other, (va.X - ref.x_mean) / ref.x_std) * ref.y_std + ref.y_mean
    assert np.array_equal(y_ref, y_other)


def test_empty_splits_rejected():
    w = cv_windows(1, 0)
    with pytest.raises(ConfigError):
        train(w, toy_spec(), TrainConfig(max_epochs=1), encoding=TOY_ENC)
    with pytest.raises(ConfigError):
        train(cv_windows(5, 0), toy_spec(), encoding=TOY_ENC, validation=w.subset(slice(0, 0)))


def test_checkpoint_round_trip(tmp_path, toy_fit):
    ck = toy_fit[0].checkpoint
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    X = toy_fit[1].X[:20]
    assert np.array_equal(predict_windows(ck, X), predict_windows(back, X))
    assert back.metadata["epochs"] == len(toy_fit[0].history)
    data = path.read_bytes()
    with pytest.raises(MalformedStreamError):
        ModelCheckpoint.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(MalformedStreamError):
        ModelCheckpoint.from_bytes(data[:-8])


def test_checkpoint_weight_count_checked(toy_fit):
    ck = toy_fit[0].checkpoint
    with pytest.raises(SpecError):
        ModelCheckpoint(ck.spec, ck.encoding, ck.theta[:-1], ck.x_mean, ck.x_std, ck.y_mean, ck.y_std)


def test_mc_dropout_rate_zero_has_no_variance(toy_fit):
    X = toy_fit[1].X[:5]
    res = mc_dropout(toy_fit[0].checkpoint, X, passes=50)
    assert np.all(res.var == 0.0)
    np.testing.assert_allclose(res.mean, predict_windows(toy_fit[0].checkpoint, X), rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def dropout_ckpt():
    tr = cv_windows(300, 0)
    return train(tr, toy_spec(dropout=0.5), TrainConfig(batch=32, max_epochs=2), encoding=TOY_ENC).checkpoint


def test_single_pass_is_degenerate(dropout_ckpt):
    est = mc_dropout_predict(cv_windows(1, 3).X[0], dropout_ckpt, passes=1)
    assert est.degenerate
    assert est.var == (0.0, 0.0)


def test_mc_mean_within_standard_error_of_long_run(dropout_ckpt):
    X = cv_windows(1, 3).X
    long = mc_dropout(dropout_ckpt, X, passes=10_000, seed=1)
    short = mc_dropout(dropout_ckpt, X, passes=200, seed=2)
    se = np.sqrt(long.var[0] / 200)
    assert np.all(np.abs(short.mean[0] - long.mean[0]) <= 3 * se)
    assert not short.degenerate


def test_dropout_expectation_matches_deterministic_output(dropout_ckpt):
    # the head is linear, so the inverted-dropout mean equals the dropout-free output
    X = cv_windows(1, 3).X
    long = mc_dropout(dropout_ckpt, X, passes=10_000, seed=1)
    det = predict_windows(dropout_ckpt, X)
    assert np.all(np.abs(long.mean[0] - det[0]) <= 3 * np.sqrt(long.var[0] / 10_000))


SEG_ENC = WindowEncoding(channels=("p_radio", "v", "theta_ori"), n_w=32, f_s=100.0)


@pytest.fixture(scope="module")
def segment_fit(walk_segment):
    spec = NetworkSpec(SEG_ENC.input_dim, (16,), 1, 16, 0.0)
    w = encode_windows(walk_segment, SEG_ENC, stride=8)
    res = train(w, spec, TrainConfig(batch=64, max_epochs=15, patience=15, lr=3e-3, validation_fraction=0.2),
                encoding=SEG_ENC)
    return res.checkpoint, w


def test_absolute_trajectory_reproduces_training_fit(segment_fit, walk_segment):
    ckpt, w = segment_fit
    n_train = ckpt.metadata["n_train"]
    train_set = w.subset(slice(0, n_train))
    fit = predict_windows(ckpt, train_set.X) + train_set.anchor
    ref = walk_segment.ref.positions
    train_mae = np.mean(np.linalg.norm(fit - ref[train_set.target_tick], axis=1))
    track = predict_trajectory(walk_segment, ckpt)
    last = w.target_tick[n_train - 1]
    sel = np.round((track.t - walk_segment.t0) * walk_segment.f_s).astype(int) <= last
    ticks = np.round((track.t[sel] - walk_segment.t0) * walk_segment.f_s).astype(int)
    traj_mae = np.mean(np.linalg.norm(track.mean[sel] - ref[ticks], axis=1))
    assert traj_mae <= 2 * train_mae


def test_trajectory_rejects_mismatched_horizon_and_mode(segment_fit, walk_segment):
    ckpt, _ = segment_fit
    with pytest.raises(SpecError):
        predict_trajectory(walk_segment, ckpt, horizon=1.0)
    with pytest.raises(SpecError):
        predict_trajectory(walk_segment, ckpt, output_mode="delta")


def test_missing_channel_is_spec_error(segment_fit, walk_segment):
    ckpt, _ = segment_fit
    drop = lambda d: {k: v for k, v in d.items() if k != "theta_ori"}
    seg = replace(walk_segment, channels=drop(walk_segment.channels), validity=drop(walk_segment.validity))
    with pytest.raises(SpecError):
        predict_trajectory(seg, ckpt)


def test_delta_mode_zero_deltas_stay_at_start(walk_segment):
    enc = WindowEncoding(channels=("p_radio", "v"), n_w=32, output_mode="delta")
    spec = NetworkSpec(enc.input_dim, (4,), 1, 4, 0.0, aux_dim=2)
    w = encode_windows(walk_segment, enc, stride=64)
    ckpt = train(w, spec, TrainConfig(max_epochs=1), encoding=enc).checkpoint
    track = predict_trajectory(walk_segment, ckpt, start=(3.0, -1.5), delta_fn=lambda k, pos: np.zeros(2))
    assert len(track.t) > 100
    assert np.all(track.mean == np.array([3.0, -1.5]))
