import math

import numpy as np
import pytest

from pdrlab.classic import (
    DeadReckonState,
    OrientationState,
    calibrate_heading,
    dead_reckon_step,
    madgwick_update,
    quaternion_tilt,
    quaternion_yaw,
    reconstruct,
    reconstruct_segment,
)
from pdrlab.errors import ConfigError
from pdrlab.pipeline import simulate_segment
from pdrlab.simkit import SensorNoiseSpec, activity_profile, generate_reference


def test_step_examples():
    s = dead_reckon_step(DeadReckonState((0.0, 0.0), 0.0), 1.0, 0.0)
    assert s.p == (1.0, 0.0)
    s = dead_reckon_step(DeadReckonState((0.0, 0.0), 0.0), 1.0, math.pi / 2)
    assert s.p == pytest.approx((0.0, 1.0), abs=1e-12)


def test_square_closes():
    s = DeadReckonState((0.0, 0.0), 0.0)
    for th in (0, math.pi / 2, math.pi, -math.pi / 2):
        s = dead_reckon_step(s, 1.0, th)
    assert s.p == pytest.approx((0.0, 0.0), abs=1e-12)


def test_negative_distance_rejected():
    with pytest.raises(ConfigError):
        dead_reckon_step(DeadReckonState((0, 0), 0), -1.0, 0.0)


def test_ground_truth_inputs_close_the_loop():
    ref = generate_reference(activity_profile("walking", 60.0), seed=5)
    rec = reconstruct(ref.positions[0], ref.speed[:-1] * 0.01, ref.heading[:-1], ref.t)
    assert np.hypot(*(rec.xy[-1] - ref.positions[-1])) < 1e-6


def test_speed_bias_drift_is_proportional_to_distance():
    ref = generate_reference(activity_profile("walking", 60.0), seed=5)
    rec = reconstruct(ref.positions[0], 1.05 * ref.speed[:-1] * 0.01, ref.heading[:-1], ref.t)
    # the error is 5% of the displacement vector, bounded by 5% of the path length
    end_err = np.hypot(*(rec.xy[-1] - ref.positions[-1]))
    assert end_err <= 0.05 * ref.cum_distance[-1] + 1e-9
    disp = ref.positions[-1] - ref.positions[0]
    assert np.allclose(rec.xy[-1] - ref.positions[-1], 0.05 * disp, atol=1e-9)


def test_recalibration_snaps_and_counts():
    rec = reconstruct((0, 0), np.ones(10), np.zeros(10), recal=[(5.0, (0.0, 3.0)), (99.0, (0, 0))])
    assert tuple(rec.xy[5]) == (0.0, 3.0) and tuple(rec.xy[10]) == (5.0, 3.0)
    assert rec.recal_applied == 1 and rec.recal_ignored == 1


def _open_walk(seed, duration=60.0):
    # no loop bias and a huge arena, so the path keeps moving away from its start
    prof = activity_profile("walking", duration, loop_turn_rate=0.0, abrupt_turn_rate=0.0,
                           turn_rate_std=0.05, arena_halfwidth=1000.0)
    return generate_reference(prof, seed)


def test_open_path_terminal_drift_is_five_percent_of_distance():
    ref = _open_walk(5)
    rec = reconstruct(ref.positions[0], 1.05 * ref.speed[:-1] * 0.01, ref.heading[:-1], ref.t)
    end_err = np.hypot(*(rec.xy[-1] - ref.positions[-1]))
    assert end_err == pytest.approx(0.05 * ref.cum_distance[-1], rel=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_biased_reconstruction_improves_with_recalibration(seed):
    prof = activity_profile("walking", 60.0, loop_turn_rate=0.0, abrupt_turn_rate=0.0,
                           turn_rate_std=0.05, arena_halfwidth=1000.0)
    seg = simulate_segment(prof, SensorNoiseSpec(speed_scale=1.05), seed=seed, policy="offline")

    def mae(interval):
        rec = reconstruct_segment(seg, "ref", interval)
        return np.mean(np.hypot(*(rec.xy - seg.ref.positions).T))

    assert mae(30.0) < mae(math.inf)


def test_madgwick_equilibrium():
    s = madgwick_update(OrientationState(), (0, 0, 0), (0, 0, 9.81), beta=0.1)
    assert s.q == pytest.approx((1, 0, 0, 0), abs=1e-9)


def test_madgwick_pure_yaw_integration():
    w = 0.7
    s = OrientationState()
    for _ in range(100):
        s = madgwick_update(s, (0, 0, w), (0, 0, 9.81), beta=0.0, dt=0.01)
    assert quaternion_yaw(s.q) == pytest.approx(w, abs=1e-6)


def test_madgwick_tilt_converges_monotonically():
    a = 0.4
    s = OrientationState((math.cos(a / 2), math.sin(a / 2), 0.0, 0.0))
    beta, dt = 0.1, 0.01
    tilts = [quaternion_tilt(s.q)]
    for _ in range(3000):
        s = madgwick_update(s, (0, 0, 0), (0, 0, 9.81), beta=beta, dt=dt)
        tilts.append(quaternion_tilt(s.q))
    # the normalised gradient step has a fixed length, so descent is monotone until the
    # tilt is within one step of level, after which it dithers inside that band
    band = 2 * beta * dt
    outside = [(a_, b) for a_, b in zip(tilts, tilts[1:]) if a_ > band]
    assert all(b < a_ for a_, b in outside)
    assert max(tilts[len(outside) + 1:]) <= band


def test_calibrate_identity_and_offset():
    p = np.column_stack([np.linspace(0, 10, 50), np.linspace(0, 5, 50)])
    th = np.full(50, math.atan2(5, 10))
    out = calibrate_heading(th, p)
    assert out.offset == pytest.approx(0.0, abs=1e-12) and np.allclose(out.theta, th)
    out = calibrate_heading(th - 0.3, p)
    assert out.offset == pytest.approx(0.3, abs=1e-6)


def test_calibrate_stationary_is_flagged():
    p = np.zeros((20, 2))
    out = calibrate_heading(np.full(20, 1.0), p)
    assert not out.calibrated and np.all(out.theta == 1.0)


def test_orientation_channel_tracks_true_heading(walk_segment):
    th = walk_segment.channel("theta_ori")[:, 0]
    err = np.angle(np.exp(1j * (th - walk_segment.ref.heading)))
    assert np.median(np.abs(err[1000:])) < 0.25
