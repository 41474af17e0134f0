"""Model-based pedestrian dead reckoning.

Positions advance by ``p += rho * (cos theta, sin theta)`` from a start fix,
optionally snapped to radio fixes on a schedule. Heading comes either from
the reference, from radio fix deltas, or from a gyro/accel orientation filter
whose yaw is aligned to radio headings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .streams import radio_heading
from .trajectory import wrap_angle

THETA_SOURCES = ("ori", "radio", "ref")


class DeadReckonState(NamedTuple):
    p: tuple
    theta: float
    t: float = 0.0


def dead_reckon_step(state: DeadReckonState, rho: float, theta: float, dt: float = 0.0):
    if rho < 0:
        raise ConfigError("rho", "distance must be non-negative")
    x, y = state.p
    return DeadReckonState((x + rho * math.cos(theta), y + rho * math.sin(theta)),
                           wrap_angle(theta), state.t + dt)


@dataclass(frozen=True)
class Reconstruction:
    t: np.ndarray
    xy: np.ndarray
    theta: np.ndarray
    recal_applied: int = 0
    recal_ignored: int = 0

    def __len__(self):
        return len(self.t)


def reconstruct(p0, rho, theta, t=None, recal=None, theta_source="ref", theta_ori=None):
    """Fold :func:`dead_reckon_step` over per-interval distances and headings.

    ``rho[k]`` and ``theta[k]`` describe the interval ``[t[k], t[k+1])``, so
    the output holds ``len(rho) + 1`` positions at boundary times ``t``.
    ``recal`` is a sequence of ``(time, (x, y))``; at the boundary nearest each
    time the position is overwritten by that fix. Times outside the span are
    ignored and counted.

    With ``theta_source="ori"`` and ``theta_ori`` given, the calibrated
    orientation replaces ``theta`` for every step.
    """
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if rho.shape != theta.shape:
        raise ConfigError("theta", "rho and theta sequences differ in length")
    if theta_source not in THETA_SOURCES:
        raise ConfigError("theta_source", f"expected one of {THETA_SOURCES}")
    if theta_source == "ori" and theta_ori is not None:
        theta = np.asarray(theta_ori, dtype=float)[: len(rho)]
    n = len(rho)
    t = np.arange(n + 1, dtype=float) if t is None else np.asarray(t, dtype=float)
    if len(t) != n + 1:
        raise ConfigError("t", "needs one more boundary time than steps")
    if np.any(rho < 0):
        raise ConfigError("rho", "distances must be non-negative")

    snaps = {}
    ignored = 0
    if recal is not None:
        half = 0.5 * (t[1] - t[0]) if n else 0.0
        for tr, p in recal:
            if tr < t[0] - half or tr > t[-1] + half:
                ignored += 1
                continue
            k = int(np.clip(np.searchsorted(t, tr - half), 0, n))
            snaps[k] = (float(p[0]), float(p[1]))

    xy = np.empty((n + 1, 2))
    x, y = float(p0[0]), float(p0[1])
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for k in range(n + 1):
        if k in snaps:
            x, y = snaps[k]
        xy[k] = (x, y)
        if k < n:
            x += rho[k] * cos_t[k]
            y += rho[k] * sin_t[k]
    heading = np.append(wrap_angle(theta), wrap_angle(theta[-1]) if n else 0.0)
    return Reconstruction(t, xy, heading, len(snaps), ignored)


def recal_schedule(segment, interval):
    """Radio fixes every ``interval`` seconds after the segment start (``inf`` -> none)."""
    if interval is None or math.isinf(interval):
        return []
    if interval <= 0:
        raise ConfigError("recal_interval", "must be positive")
    times = segment.times
    p = segment.channel("p_radio")
    ok = segment.valid("p_radio")
    out = []
    k_step = int(round(interval * segment.f_s))
    for k in range(k_step, segment.n_ticks, k_step):
        if ok[k]:
            out.append((float(times[k]), tuple(p[k])))
    return out


def _first_valid(segment, name):
    ok = np.flatnonzero(segment.valid(name))
    if not len(ok):
        raise InsufficientDataError(f"segment has no valid {name} samples")
    return int(ok[0])


def reconstruct_segment(segment, theta_source="ori", recal_interval=math.inf, p0=None):
    """Per-tick dead reckoning over a segment with ``rho = v / f_s``.

    Starts from the first valid radio fix (or ``p0``) and returns positions
    on every tick of the segment.
    """
    chan = {"ori": "theta_ori", "radio": "theta_radio"}.get(theta_source)
    if theta_source == "ref":
        if segment.ref is None:
            raise InsufficientDataError("theta_source='ref' needs a reference")
        theta = np.asarray(segment.ref.heading)
    elif theta_source in ("ori", "radio"):
        theta = _fill(segment.channel(chan)[:, 0], segment.valid(chan))
    else:
        raise ConfigError("theta_source", f"expected one of {THETA_SOURCES}")
    v = _fill(segment.channel("v")[:, 0], segment.valid("v"))
    dt = 1.0 / segment.f_s
    if p0 is None:
        p0 = segment.channel("p_radio")[_first_valid(segment, "p_radio")]
    rho = np.maximum(v[:-1], 0.0) * dt
    rec = reconstruct(p0, rho, theta[:-1], segment.times, recal_schedule(segment, recal_interval),
                      theta_source=theta_source)
    return rec


def _fill(values, ok):
    """Forward-fill invalid entries (leading gaps take the first valid value, or 0)."""
    values = np.asarray(values, dtype=float).copy()
    if not ok.any():
        return np.zeros_like(values)
    idx = np.where(ok, np.arange(len(values)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = int(np.argmax(ok))
    return values[idx]


def window_steps(segment, n_w=128, overlap=0.5, theta_source="ori", dt_mode="stride"):
    """Per-window distances and headings for the coarse, per-window transform.

    Each window contributes ``rho = mean(v) * dt`` with ``dt`` either the
    window stride duration (``"stride"``) or a fixed 1 s (``"unit"``), and
    its circular-mean heading.
    """
    from .streams import window_stride

    stride = window_stride(n_w, overlap)
    dt = stride / segment.f_s if dt_mode == "stride" else 1.0
    if dt_mode not in ("stride", "unit"):
        raise ConfigError("dt_mode", "expected 'stride' or 'unit'")
    v = _fill(segment.channel("v")[:, 0], segment.valid("v"))
    if theta_source == "ref":
        theta = np.asarray(segment.ref.heading)
    else:
        chan = {"ori": "theta_ori", "radio": "theta_radio"}[theta_source]
        theta = _fill(segment.channel(chan)[:, 0], segment.valid(chan))
    rho, th = [], []
    for start in range(0, segment.n_ticks - stride + 1, stride):
        sl = slice(start, start + stride)
        rho.append(max(float(np.mean(v[sl])), 0.0) * dt)
        th.append(math.atan2(np.mean(np.sin(theta[sl])), np.mean(np.cos(theta[sl]))))
    return np.array(rho), np.array(th)


# -- orientation ----------------------------------------------------------------


class OrientationState(NamedTuple):
    q: tuple = (1.0, 0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def madgwick_update(state: OrientationState, gyro, accel, beta=0.1, dt=0.01):
    """One IMU-only Madgwick step (no magnetometer), scalar-first quaternion.

    The gyro rotation is applied with the exact quaternion exponential; the
    accelerometer correction is the normalised gradient of the gravity
    misalignment objective, scaled by ``beta * dt``.
    """
    if dt <= 0:
        raise ConfigError("dt", "must be positive")
    if beta < 0:
        raise ConfigError("beta", "must be non-negative")
    gx, gy, gz = (float(g) - float(b) for g, b in zip(gyro, state.gyro_bias))
    q = state.q

    rate = math.sqrt(gx * gx + gy * gy + gz * gz)
    if rate > 0.0:
        half = 0.5 * rate * dt
        s = math.sin(half) / rate
        q = _qmul(q, (math.cos(half), gx * s, gy * s, gz * s))

    ax, ay, az = (float(a) for a in accel)
    a_norm = math.sqrt(ax * ax + ay * ay + az * az)
    if beta > 0.0 and a_norm > 0.0:
        ax, ay, az = ax / a_norm, ay / a_norm, az / a_norm
        q0, q1, q2, q3 = q
        f1 = 2.0 * (q1 * q3 - q0 * q2) - ax
        f2 = 2.0 * (q0 * q1 + q2 * q3) - ay
        f3 = 2.0 * (0.5 - q1 * q1 - q2 * q2) - az
        s0 = -2.0 * q2 * f1 + 2.0 * q1 * f2
        s1 = 2.0 * q3 * f1 + 2.0 * q0 * f2 - 4.0 * q1 * f3
        s2 = -2.0 * q0 * f1 + 2.0 * q3 * f2 - 4.0 * q2 * f3
        s3 = 2.0 * q1 * f1 + 2.0 * q2 * f2
        s_norm = math.sqrt(s0 * s0 + s1 * s1 + s2 * s2 + s3 * s3)
        if s_norm > 0.0:
            k = beta * dt / s_norm
            q = (q0 - k * s0, q1 - k * s1, q2 - k * s2, q3 - k * s3)

    n = math.sqrt(sum(c * c for c in q))
    return OrientationState(tuple(c / n for c in q), state.gyro_bias)


def quaternion_yaw(q):
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quaternion_tilt(q):
    """Angle between the body z axis and the world vertical."""
    w, x, y, z = q
    cos_tilt = 1.0 - 2.0 * (x * x + y * y)
    return math.acos(max(-1.0, min(1.0, cos_tilt)))


def orientation_yaw(acc, gyro, f_s, beta=0.1, state=None):
    """Run the orientation filter over per-tick IMU channels and return yaw."""
    acc = np.asarray(acc, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    if gyro.ndim == 1:
        gyro = gyro[:, None]
    if gyro.shape[1] == 1:
        gyro = np.column_stack([np.zeros(len(gyro)), np.zeros(len(gyro)), gyro[:, 0]])
    dt = 1.0 / f_s
    state = state or OrientationState()
    yaw = np.empty(len(gyro))
    for k in range(len(gyro)):
        g = gyro[k] if np.all(np.isfinite(gyro[k])) else (0.0, 0.0, 0.0)
        a = acc[k] if np.all(np.isfinite(acc[k])) else (0.0, 0.0, 0.0)
        state = madgwick_update(state, g, a, beta, dt)
        yaw[k] = quaternion_yaw(state.q)
    return yaw


class HeadingCalibration(NamedTuple):
    theta: np.ndarray
    offset: float
    calibrated: bool


def calibrate_heading(theta_ori, radio_positions, window=None, f_s=100.0, min_displacement=0.5):
    """Align orientation yaw to the radio direction of travel.

    The offset is the displacement-weighted circular mean of
    ``theta_radio - theta_ori`` over the trailing ``window`` seconds (all
    samples when ``None``). If the radio track moves less than
    ``min_displacement`` metres over that span, the input is returned
    unchanged and flagged uncalibrated.
    """
    theta_ori = np.asarray(theta_ori, dtype=float)
    p = np.asarray(radio_positions, dtype=float)
    if len(p) != len(theta_ori):
        raise ConfigError("radio_positions", "must align with theta_ori")
    if window is not None:
        n = max(2, int(round(window * f_s)))
        theta_w, p_w = theta_ori[-n:], p[-n:]
    else:
        theta_w, p_w = theta_ori, p
    keep = np.isfinite(p_w).all(axis=1) & np.isfinite(theta_w)
    theta_w, p_w = theta_w[keep], p_w[keep]
    if len(p_w) < 2:
        raise InsufficientDataError("calibrate_heading needs at least two radio positions")
    if np.hypot(*(p_w[-1] - p_w[0])) < min_displacement:
        return HeadingCalibration(theta_ori.copy(), 0.0, False)
    steps = np.hypot(*np.diff(p_w, axis=0).T)
    theta_r = radio_heading(p_w)[:-1]
    diff = theta_r - theta_w[:-1]
    offset = math.atan2(np.sum(steps * np.sin(diff)), np.sum(steps * np.cos(diff)))
    return HeadingCalibration(wrap_angle(theta_ori + offset), offset, True)


def calibrated_orientation(segment, beta=0.1, block=10.0, min_displacement=0.5):
    """``theta_ori`` channel: filter yaw aligned blockwise to radio headings.

    Each ``block``-second span is rotated by the offset estimated on the span
    itself; spans without enough motion reuse the previous offset.
    """
    yaw = orientation_yaw(segment.channel("acc"), segment.channel("gyro"), segment.f_s, beta)
    p = segment.channel("p_radio")
    ok = segment.valid("p_radio")
    n_block = max(2, int(round(block * segment.f_s)))
    out = np.empty_like(yaw)
    offset = 0.0
    for start in range(0, len(yaw), n_block):
        sl = slice(start, min(start + n_block, len(yaw)))
        m = ok[sl]
        if m.sum() >= 2:
            cal = calibrate_heading(yaw[sl][m], p[sl][m], min_displacement=min_displacement)
            if cal.calibrated:
                offset = cal.offset
        out[sl] = wrap_angle(yaw[sl] + offset)
    return out, segment.validity["gyro"].copy()
