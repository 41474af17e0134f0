"""Constant-velocity linear Kalman filter fusing radio fixes and speed-derived velocity.

State ``x = (px, py, vx, vy)``. Process noise is the discretised white
acceleration model ``Q(dt) = q0 * [[dt^3/3, dt^2/2], [dt^2/2, dt]]`` per axis.
Updates use the Joseph form.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .poses import PoseTrack
from .streams import OBSERVED

HEADING_SOURCES = ("auto", "radio", "ori")


@dataclass(frozen=True)
class KfConfig:
    p0: float = 1.0
    q0: float = 0.1
    r_pos: float = 0.1
    r_vel: float = 0.1
    x0: tuple = (0.0, 0.0, 0.0, 0.0)
    heading_source: str = "ori"
    moving_speed: float = 0.5
    use_acc: bool = False

    def __post_init__(self):
        for name in ("p0", "q0", "r_pos", "r_vel"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be strictly positive")
        if len(self.x0) != 4:
            raise ConfigError("x0", "needs four entries (px, py, vx, vy)")
        if self.heading_source not in HEADING_SOURCES:
            raise ConfigError("heading_source", f"expected one of {HEADING_SOURCES}")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))


class KfState(NamedTuple):
    x: np.ndarray
    P: np.ndarray
    t: float = 0.0
    n_rejected: int = 0
    innovation: tuple | None = None  # (y, S) of the most recent update


def initial_state(config: KfConfig, t=0.0):
    return KfState(np.array(config.x0, dtype=float), np.eye(4) * config.p0, t)


def transition(dt):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt, q0):
    q = q0 * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    Q = np.zeros((4, 4))
    for axis in (0, 1):
        idx = [axis, axis + 2]
        Q[np.ix_(idx, idx)] = q
    return Q


def kf_predict(state: KfState, dt: float, q0: float, accel=None):
    """Constant-velocity time update; ``accel`` (world frame) optionally drives it."""
    if dt <= 0:
        raise ConfigError("dt", "must be positive")
    F = transition(dt)
    x = F @ state.x
    if accel is not None:
        a = np.asarray(accel, dtype=float)
        x[:2] += 0.5 * a * dt * dt
        x[2:] += a * dt
    P = F @ state.P @ F.T + process_noise(dt, q0)
    P = 0.5 * (P + P.T)
    return state._replace(x=x, P=P, t=state.t + dt)


def kf_update(state: KfState, z, H, R):
    """Joseph-form measurement update. Non-finite measurements are rejected."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        return state._replace(n_rejected=state.n_rejected + 1)
    y = z - H @ state.x
    S = H @ state.P @ H.T + R
    K = np.linalg.solve(S, H @ state.P).T
    x = state.x + K @ y
    A = np.eye(4) - K @ H
    P = A @ state.P @ A.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    return state._replace(x=x, P=P, innovation=(y, S))


_H_POS = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
_H_VEL = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]])


def kf_update_position(state: KfState, z, r_pos: float):
    if not r_pos > 0:
        raise ConfigError("r_pos", "must be strictly positive")
    return kf_update(state, z, _H_POS, np.eye(2) * r_pos)


def kf_update_velocity(state: KfState, speed: float, theta: float, r_vel: float):
    """Treat ``speed * (cos theta, sin theta)`` as a direct velocity measurement."""
    if not r_vel > 0:
        raise ConfigError("r_vel", "must be strictly positive")
    z = (speed * math.cos(theta), speed * math.sin(theta))
    return kf_update(state, z, _H_VEL, np.eye(2) * r_vel)


def forecast(state: KfState, horizon: float, q0: float):
    """Pure prediction ``horizon`` seconds ahead (identity when horizon is 0)."""
    if horizon <= 0:
        return state
    return kf_predict(state, horizon, q0)


# -- segment runner -------------------------------------------------------------


class _AxisFilter:
    """Scalar implementation of the filter for isotropic noise.

    With isotropic position/velocity noise, block-diagonal Q and an isotropic
    prior, the x and y axes are independent filters that share one 2x2
    covariance. This runs them with plain floats; results match the matrix
    path in :func:`kf_predict` / :func:`kf_update` to rounding.
    """

    __slots__ = ("px", "py", "vx", "vy", "pp", "pv", "vv")

    def __init__(self, config: KfConfig):
        self.px, self.py, self.vx, self.vy = config.x0
        self.pp, self.pv, self.vv = config.p0, 0.0, config.p0

    def predict(self, dt, q0, ax=0.0, ay=0.0):
        self.px += self.vx * dt + 0.5 * ax * dt * dt
        self.py += self.vy * dt + 0.5 * ay * dt * dt
        self.vx += ax * dt
        self.vy += ay * dt
        pp, pv, vv = self.pp, self.pv, self.vv
        self.pp = pp + 2 * dt * pv + dt * dt * vv + q0 * dt ** 3 / 3
        self.pv = pv + dt * vv + q0 * dt ** 2 / 2
        self.vv = vv + q0 * dt

    def _update(self, zx, zy, r, on_position):
        pp, pv, vv = self.pp, self.pv, self.vv
        if on_position:
            s = pp + r
            k1, k2 = pp / s, pv / s
            yx, yy = zx - self.px, zy - self.py
        else:
            s = vv + r
            k1, k2 = pv / s, vv / s
            yx, yy = zx - self.vx, zy - self.vy
        self.px += k1 * yx
        self.py += k1 * yy
        self.vx += k2 * yx
        self.vy += k2 * yy
        # Joseph form written out for H = e1 (position) or e2 (velocity)
        if on_position:
            a11, a21 = 1 - k1, -k2
            self.pp = a11 * a11 * pp + k1 * k1 * r
            self.pv = a11 * (a21 * pp + pv) + k1 * k2 * r
            self.vv = a21 * a21 * pp + 2 * a21 * pv + vv + k2 * k2 * r
        else:
            a12, a22 = -k1, 1 - k2
            self.pp = pp + 2 * a12 * pv + a12 * a12 * vv + k1 * k1 * r
            self.pv = a22 * (pv + a12 * vv) + k1 * k2 * r
            self.vv = a22 * a22 * vv + k2 * k2 * r
        return yx, yy, s

    def update_position(self, zx, zy, r):
        return self._update(zx, zy, r, True)

    def update_velocity(self, zx, zy, r):
        return self._update(zx, zy, r, False)


def _velocity_heading(segment, config):
    """Per-tick heading for the velocity measurement (NaN where none is usable)."""
    n = segment.n_ticks
    th_r = segment.channel("theta_radio")[:, 0] if "theta_radio" in segment.channels else np.full(n, np.nan)
    ok_r = segment.valid("theta_radio") if "theta_radio" in segment.channels else np.zeros(n, bool)
    th_o = segment.channel("theta_ori")[:, 0] if "theta_ori" in segment.channels else np.full(n, np.nan)
    ok_o = segment.valid("theta_ori") if "theta_ori" in segment.channels else np.zeros(n, bool)
    if config.heading_source == "radio":
        return np.where(ok_r, th_r, np.nan)
    if config.heading_source == "ori":
        return np.where(ok_o, th_o, np.nan)
    v = segment.channel("v")[:, 0]
    moving = ok_r & (np.nan_to_num(v) > config.moving_speed)
    return np.where(moving, th_r, np.where(ok_o, th_o, np.nan))


def kf_run(segment, config: KfConfig = KfConfig(), horizon: float = 0.0, return_innovations=False):
    """Filter a synchronised segment tick by tick.

    Radio fixes update on ticks where a new fix entered the channel; speed
    updates likewise. The estimate at tick ``k`` is forecast ``horizon``
    seconds ahead, so ``track.t = tick time + horizon``. Passing a list of
    streams synchronises them under the realtime policy first.
    """
    from .streams import Segment

    if not isinstance(segment, Segment):
        from .pipeline import build_segment

        segment = build_segment(segment, policy="realtime")
    n = segment.n_ticks
    dt = 1.0 / segment.f_s
    p = segment.channel("p_radio")
    p_new = segment.validity["p_radio"] == OBSERVED
    v = segment.channel("v")[:, 0]
    v_new = segment.validity["v"] == OBSERVED
    heading = _velocity_heading(segment, config)
    acc_world = None
    if config.use_acc and "acc" in segment.channels:
        acc = np.nan_to_num(segment.channel("acc"))
        th = np.nan_to_num(segment.channel("theta_ori")[:, 0])
        acc_world = np.column_stack([
            acc[:, 0] * np.cos(th) - acc[:, 1] * np.sin(th),
            acc[:, 0] * np.sin(th) + acc[:, 1] * np.cos(th),
        ])

    f = _AxisFilter(config)
    q0, r_pos, r_vel = config.q0, config.r_pos, config.r_vel
    h = float(horizon)
    mean = np.empty((n, 2))
    var = np.empty((n, 2))
    innovations = []
    for k in range(n):
        if k:
            if acc_world is None:
                f.predict(dt, q0)
            else:
                f.predict(dt, q0, acc_world[k - 1, 0], acc_world[k - 1, 1])
        if p_new[k]:
            zx, zy = p[k]
            if math.isfinite(zx) and math.isfinite(zy):
                yx, yy, s = f.update_position(zx, zy, r_pos)
                if return_innovations:
                    innovations.append((yx / math.sqrt(s), yy / math.sqrt(s)))
        if v_new[k] and math.isfinite(heading[k]) and math.isfinite(v[k]):
            f.update_velocity(v[k] * math.cos(heading[k]), v[k] * math.sin(heading[k]), r_vel)
        if h > 0:
            mean[k] = (f.px + f.vx * h, f.py + f.vy * h)
            pp = f.pp + 2 * h * f.pv + h * h * f.vv + q0 * h ** 3 / 3
        else:
            mean[k] = (f.px, f.py)
            pp = f.pp
        var[k] = (pp, pp)
    track = PoseTrack(segment.times + h, mean, var, h)
    if return_innovations:
        return track, np.array(innovations).reshape(-1, 2)
    return track


def track_mae(track: PoseTrack, segment, start_tick=0):
    """Mean position error of a tick-aligned track against the segment reference."""
    h_ticks = int(round(track.horizon * segment.f_s))
    ref = segment.ref.positions
    n = segment.n_ticks - h_ticks
    est = track.mean[start_tick:n]
    truth = ref[start_tick + h_ticks:n + h_ticks]
    return float(np.mean(np.hypot(*(est - truth).T)))


@dataclass(frozen=True)
class TuneResult:
    config: KfConfig
    losses: dict = field(default_factory=dict)


def kf_tune(segments, q0_grid, r_pos_grid, r_vel_grid=None, base: KfConfig = KfConfig(),
            start_tick=0, return_losses=False):
    """Grid search minimising mean position MAE over training segments.

    Ties resolve towards the smaller ``q0``, then smaller ``r_pos``, then ``r_vel``.
    """
    segments = list(segments)
    q0_grid = list(q0_grid)
    r_pos_grid = list(r_pos_grid)
    r_vel_grid = list(r_vel_grid) if r_vel_grid is not None else [base.r_vel]
    if not segments:
        raise ConfigError("segments", "kf_tune needs training data")
    if not q0_grid or not r_pos_grid or not r_vel_grid:
        raise ConfigError("grid", "kf_tune needs a non-empty grid")
    losses = {}
    for q0, r_pos, r_vel in itertools.product(q0_grid, r_pos_grid, r_vel_grid):
        cfg = replace(base, q0=q0, r_pos=r_pos, r_vel=r_vel)
        losses[(q0, r_pos, r_vel)] = float(np.mean([track_mae(kf_run(s, cfg), s, start_tick) for s in segments]))
    best = min(losses, key=lambda key: (losses[key], key))
    cfg = replace(base, q0=best[0], r_pos=best[1], r_vel=best[2])
    if return_losses:
        return TuneResult(cfg, losses)
    return cfg
