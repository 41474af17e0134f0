"""Synthetic reference trajectories and the noisy, delayed sensor streams derived from them.

Motion follows two discretised mean-reverting processes, one for speed and one
for turn rate. Loop-like activities carry a constant steering bias; the
``random`` activity gets a wider turn-rate spread and frequent abrupt turns.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EmptyInputError
from .streams import Stream
from .trajectory import Trajectory, TurnEvent, wrap_angle

GRAVITY = 9.81
KINDS = ("walking", "jogging", "running", "random")

_SPEED_REVERSION = 0.5   # 1/s
_TURN_REVERSION = 1.0    # 1/s
_ABRUPT_TURN_DURATION = 0.3  # s


@dataclass(frozen=True)
class ActivityProfile:
    kind: str = "walking"
    speed_mean: float = 2.5
    speed_min: float = 0.8
    speed_max: float = 7.9
    turn_rate_std: float = 0.3
    duration: float = 60.0
    arena_halfwidth: float = 20.0
    speed_std: float | None = None
    loop_turn_rate: float = 0.0
    abrupt_turn_rate: float = 0.0
    initial_heading: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"expected one of {KINDS}")
        for name in ("speed_mean", "speed_min", "speed_max", "duration", "arena_halfwidth"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be strictly positive")
        if not self.speed_min <= self.speed_mean <= self.speed_max:
            raise ConfigError("speed_mean", "must satisfy speed_min <= speed_mean <= speed_max")
        for name in ("turn_rate_std", "abrupt_turn_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.speed_std is not None and self.speed_std < 0:
            raise ConfigError("speed_std", "must be non-negative")

    @property
    def speed_spread(self):
        if self.speed_std is not None:
            return self.speed_std
        return (self.speed_max - self.speed_min) / 6.0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown profile field")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def activity_profile(kind, duration=60.0, **overrides):
    """Preset profiles for the four activity classes.

    Speeds are chosen so the mixture spans the 0.8-7.9 m/s range of the
    original recordings; the loop rates give radii of roughly 4-8 m.
    """
    presets = {
        "walking": dict(speed_mean=1.4, speed_min=0.8, speed_max=2.2, turn_rate_std=0.25,
                        loop_turn_rate=0.25, abrupt_turn_rate=1 / 30),
        "jogging": dict(speed_mean=2.8, speed_min=1.8, speed_max=3.8, turn_rate_std=0.25,
                        loop_turn_rate=0.45, abrupt_turn_rate=1 / 30),
        "running": dict(speed_mean=4.0, speed_min=2.8, speed_max=6.0, turn_rate_std=0.25,
                        loop_turn_rate=0.5, abrupt_turn_rate=1 / 30),
        "random": dict(speed_mean=2.5, speed_min=0.8, speed_max=7.9, turn_rate_std=0.8,
                       loop_turn_rate=0.0, abrupt_turn_rate=1 / 5),
    }
    if kind not in presets:
        raise ConfigError("kind", f"expected one of {KINDS}")
    params = dict(presets[kind], kind=kind, duration=duration, arena_halfwidth=20.0)
    params.update(overrides)
    return ActivityProfile(**params)


@dataclass(frozen=True)
class SensorNoiseSpec:
    radio_pos_std: float = 0.15
    radio_rate: float = 10.0
    radio_delay_range: tuple = (0.098, 0.244)
    radio_drop_prob: float = 0.0
    imu_rate: float = 100.0
    accel_noise_std: float = 0.05
    gyro_noise_std: float = 0.005
    gyro_bias_walk_std: float = 1e-4
    imu_delay_range: tuple = (0.005, 0.013)
    speed_noise_std: float = 0.05
    speed_scale: float = 1.0

    def __post_init__(self):
        for name in ("radio_pos_std", "accel_noise_std", "gyro_noise_std",
                     "gyro_bias_walk_std", "speed_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not 0 <= self.radio_drop_prob <= 1:
            raise ConfigError("radio_drop_prob", "must lie in [0, 1]")
        for name in ("radio_rate", "imu_rate", "speed_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be strictly positive")
        for name in ("radio_delay_range", "imu_delay_range"):
            rng = tuple(float(v) for v in getattr(self, name))
            if len(rng) != 2 or rng[0] < 0 or rng[0] > rng[1]:
                raise ConfigError(name, "must be a non-negative [lo, hi] pair with lo <= hi")
            object.__setattr__(self, name, rng)

    @classmethod
    def noiseless(cls, **overrides):
        base = dict(radio_pos_std=0.0, radio_delay_range=(0.0, 0.0), accel_noise_std=0.0,
                    gyro_noise_std=0.0, gyro_bias_walk_std=0.0, imu_delay_range=(0.0, 0.0),
                    speed_noise_std=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown noise field")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["radio_delay_range"] = list(self.radio_delay_range)
        d["imu_delay_range"] = list(self.imu_delay_range)
        return d


def generate_reference(profile: ActivityProfile, seed: int, dt: float = 0.01) -> Trajectory:
    """Simulate one ground-truth trajectory starting at the origin.

    Position integrates the speed and heading held at the start of each step,
    so ``p[k+1] = p[k] + speed[k] * dt * (cos, sin)(heading[k])`` exactly.
    """
    if not 0 < dt <= 0.01:
        raise ConfigError("dt", "must lie in (0, 0.01]")
    rng = np.random.default_rng(seed)
    n = int(round(profile.duration / dt)) + 1
    t = np.arange(n) * dt

    heading0 = profile.initial_heading
    if heading0 is None:
        heading0 = rng.uniform(-math.pi, math.pi)
    loop_sign = 1.0 if rng.random() < 0.5 else -1.0
    n_speed = rng.standard_normal(n)
    n_turn = rng.standard_normal(n)

    # abrupt turns: Poisson arrivals, magnitude uniform in [pi/2, pi] with random sign
    events = []
    turn_profile = np.zeros(n)
    if profile.abrupt_turn_rate > 0:
        t_next = rng.exponential(1.0 / profile.abrupt_turn_rate)
        ramp = max(1, int(round(_ABRUPT_TURN_DURATION / dt)))
        while t_next < profile.duration - _ABRUPT_TURN_DURATION:
            angle = rng.uniform(math.pi / 2, math.pi) * (1.0 if rng.random() < 0.5 else -1.0)
            k0 = int(round(t_next / dt))
            turn_profile[k0:k0 + ramp] += angle / (ramp * dt)
            events.append(TurnEvent(float(t[k0]), float(angle)))
            t_next += _ABRUPT_TURN_DURATION + rng.exponential(1.0 / profile.abrupt_turn_rate)

    v_lo, v_hi = profile.speed_min, profile.speed_max
    sig_v = profile.speed_spread * math.sqrt(2 * _SPEED_REVERSION * dt)
    sig_w = profile.turn_rate_std * math.sqrt(2 * _TURN_REVERSION * dt)
    bias = loop_sign * profile.loop_turn_rate
    arena = profile.arena_halfwidth

    x = np.zeros(n)
    y = np.zeros(n)
    speed = np.zeros(n)
    heading = np.zeros(n)
    turn = np.zeros(n)
    wander = 0.0
    v = profile.speed_mean
    th = wrap_angle(heading0)
    for k in range(n):
        speed[k] = v
        heading[k] = th
        # steer back towards the arena centre once outside 70% of the halfwidth
        r = math.hypot(x[k], y[k])
        steer = 0.0
        if r > 0.7 * arena:
            to_centre = math.atan2(-y[k], -x[k])
            err = wrap_angle(to_centre - th)
            steer = 2.0 * err * min(1.0, (r - 0.7 * arena) / (0.3 * arena))
        omega = bias + wander + steer + turn_profile[k]
        turn[k] = omega
        if k + 1 < n:
            x[k + 1] = x[k] + v * dt * math.cos(th)
            y[k + 1] = y[k] + v * dt * math.sin(th)
            th = wrap_angle(th + omega * dt)
            wander += -_TURN_REVERSION * wander * dt + sig_w * n_turn[k]
            v += _SPEED_REVERSION * (profile.speed_mean - v) * dt + sig_v * n_speed[k]
            v = min(max(v, v_lo), v_hi)
    cum = np.concatenate([[0.0], np.cumsum(speed[:-1] * dt)])
    return Trajectory(t, x, y, speed, heading, cum, turn, tuple(events))


class ImuStreams(NamedTuple):
    accel: Stream
    gyro: Stream
    speed: Stream
    gyro_bias: np.ndarray

    def streams(self):
        return [self.accel, self.gyro, self.speed]


def _sample_times(ref, rate):
    t0, t1 = float(ref.t[0]), float(ref.t[-1])
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    return t0 + np.arange(n) / rate


def sample_radio(ref: Trajectory, spec: SensorNoiseSpec, seed: int, source="radio") -> Stream:
    """Noisy, delayed radio fixes at ``spec.radio_rate``.

    Random draws happen in a fixed order from ``default_rng(seed)``: position
    noise ``(n, 2)``, delays ``(n,)``, then drop uniforms ``(n,)``; a sample is
    kept when its uniform is ``>= radio_drop_prob``.
    """
    if ref is None or len(ref) == 0:
        raise EmptyInputError("sample_radio needs a non-empty reference")
    rng = np.random.default_rng(seed)
    ts = _sample_times(ref, spec.radio_rate)
    n = len(ts)
    noise = rng.standard_normal((n, 2)) * spec.radio_pos_std
    delay = rng.uniform(spec.radio_delay_range[0], spec.radio_delay_range[1], n)
    keep = rng.random(n) >= spec.radio_drop_prob
    pos = np.column_stack([np.interp(ts, ref.t, ref.x), np.interp(ts, ref.t, ref.y)])
    # fixes landing on a reference tick take that pose verbatim (interp can be off by an ulp)
    k = np.clip(np.searchsorted(ref.t, ts), 0, len(ref) - 1)
    k = np.where((k > 0) & (np.abs(ref.t[k - 1] - ts) < np.abs(ref.t[k] - ts)), k - 1, k)
    on_tick = np.abs(ref.t[k] - ts) < 1e-9
    pos[on_tick] = np.column_stack([ref.x[k[on_tick]], ref.y[k[on_tick]]])
    pos = pos + noise
    return Stream("radio_pos", ts[keep], ts[keep] + delay[keep], pos[keep], source)


def _derivative(values, t):
    d = np.zeros_like(values)
    if len(values) > 1:
        d[:-1] = np.diff(values) / np.diff(t)
        d[-1] = d[-2] if len(values) > 2 else d[0]
    return d


def sample_imu(ref: Trajectory, spec: SensorNoiseSpec, seed: int, source="imu"):
    """Body-frame accelerometer, z-gyro and speed streams at ``spec.imu_rate``.

    The device is assumed level with x forward, y left and z up, so the
    accelerometer reads (dv/dt, v * omega, g). The gyro reads the turn rate
    plus a random-walk bias plus white noise. The speed channel is
    ``speed_scale * v + noise``, clipped at zero.

    All three streams share one delay draw per IMU tick; ``gyro_bias`` in the
    returned :class:`ImuStreams` holds the true bias path.
    """
    if ref is None or len(ref) == 0:
        raise EmptyInputError("sample_imu needs a non-empty reference")
    rng = np.random.default_rng(seed)
    ts = _sample_times(ref, spec.imu_rate)
    n = len(ts)
    v = np.interp(ts, ref.t, ref.speed)
    if ref.turn_rate is not None:
        omega = np.interp(ts, ref.t, ref.turn_rate)
    else:
        omega = _derivative(np.unwrap(ref.heading), ref.t)
        omega = np.interp(ts, ref.t, omega)
    dv = _derivative(np.asarray(ref.speed), ref.t)
    forward = np.interp(ts, ref.t, dv)
    lateral = v * omega

    acc_noise = rng.standard_normal((n, 3)) * spec.accel_noise_std
    gyro_noise = rng.standard_normal(n) * spec.gyro_noise_std
    bias_steps = rng.standard_normal(n) * spec.gyro_bias_walk_std
    speed_noise = rng.standard_normal(n) * spec.speed_noise_std
    delay = rng.uniform(spec.imu_delay_range[0], spec.imu_delay_range[1], n)

    dts = np.diff(ts, prepend=ts[0])
    bias = np.cumsum(bias_steps * np.sqrt(dts))
    accel = np.column_stack([forward, lateral, np.full(n, GRAVITY)]) + acc_noise
    gyro = omega + bias + gyro_noise
    speed = np.maximum(spec.speed_scale * v + speed_noise, 0.0)
    t_avail = ts + delay
    return ImuStreams(
        Stream("accel", ts, t_avail, accel, source),
        Stream("gyro", ts, t_avail, gyro[:, None], source),
        Stream("speed", ts, t_avail, speed[:, None], source),
        bias,
    )


def inject_gap(stream: Stream, start: float, length: float) -> Stream:
    """Drop every sample measured in ``[start, start + length)``."""
    if start < 0 or length <= 0:
        raise ConfigError("gap", "start must be >= 0 and length > 0")
    inside = (stream.t_meas >= start) & (stream.t_meas < start + length)
    return stream.select(~inside)


def simulate_streams(profile, spec, seed, dt=0.01):
    """Reference plus all sensor streams for one (profile, noise, seed) triple."""
    ref = generate_reference(profile, seed, dt)
    seeds = np.random.SeedSequence(seed).spawn(2)
    radio = sample_radio(ref, spec, int(seeds[0].generate_state(1)[0]))
    imu = sample_imu(ref, spec, int(seeds[1].generate_state(1)[0]))
    return ref, [radio, *imu.streams()]
