"""Asynchronous sensor streams, synchronisation onto a uniform grid, and windowing.

A :class:`Stream` holds samples of one modality from one source in columnar
form. :func:`synchronize` resamples a collection of streams into a
:class:`Segment` whose channels share one time grid; :func:`make_windows`
slices a segment into fixed-length :class:`WindowBundle` objects.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    InsufficientDataError,
    MalformedStreamError,
    MissingModalityError,
)
from .trajectory import ReferencePose, Trajectory, TurnEvent, interp_angle

MODALITY_DIMS = {"radio_pos": 2, "accel": 3, "gyro": 1, "speed": 1}

CHANNEL_DIMS = {"p_radio": 2, "theta_radio": 1, "v": 1, "theta_ori": 1, "acc": 3, "gyro": 1}
ANGLE_CHANNELS = frozenset({"theta_radio", "theta_ori"})

# validity codes, one per tick and channel
MISSING, OBSERVED, INTERPOLATED, HELD = 0, 1, 2, 3

POLICIES = ("offline", "realtime")

_TIME_TOL = 1e-9


@dataclass(frozen=True)
class SensorSample:
    t_meas: float
    t_avail: float
    modality: str
    values: tuple
    source: str = ""

    def __post_init__(self):
        if self.modality not in MODALITY_DIMS:
            raise MalformedStreamError(f"unknown modality {self.modality!r}")
        values = tuple(float(v) for v in self.values)
        if len(values) != MODALITY_DIMS[self.modality]:
            raise MalformedStreamError(
                f"{self.modality} expects {MODALITY_DIMS[self.modality]} values, got {len(values)}"
            )
        if self.t_avail < self.t_meas:
            raise MalformedStreamError("t_avail precedes t_meas")
        object.__setattr__(self, "values", values)

    def to_json(self):
        return {
            "t_meas": self.t_meas,
            "t_avail": self.t_avail,
            "modality": self.modality,
            "values": list(self.values),
            "source": self.source,
        }


class Stream:
    """Immutable, columnar samples of a single modality and source."""

    __slots__ = ("modality", "source", "t_meas", "t_avail", "values")

    def __init__(self, modality, t_meas, t_avail, values, source=""):
        if modality not in MODALITY_DIMS:
            raise MalformedStreamError(f"unknown modality {modality!r}")
        dim = MODALITY_DIMS[modality]
        t_meas = np.array(t_meas, dtype=float).reshape(-1)
        t_avail = np.array(t_avail, dtype=float).reshape(-1)
        values = np.array(values, dtype=float).reshape(len(t_meas), dim)
        if len(t_avail) != len(t_meas):
            raise MalformedStreamError("t_meas and t_avail differ in length")
        if np.any(t_avail < t_meas):
            raise MalformedStreamError("t_avail precedes t_meas")
        for arr in (t_meas, t_avail, values):
            arr.setflags(write=False)
        self.modality = modality
        self.source = source
        self.t_meas = t_meas
        self.t_avail = t_avail
        self.values = values

    @classmethod
    def empty(cls, modality, source=""):
        return cls(modality, [], [], np.empty((0, MODALITY_DIMS[modality])), source)

    @classmethod
    def from_samples(cls, samples, modality=None, source=None):
        samples = list(samples)
        if not samples:
            if modality is None:
                raise MalformedStreamError("cannot infer modality of an empty sample list")
            return cls.empty(modality, source or "")
        modality = modality or samples[0].modality
        source = samples[0].source if source is None else source
        if any(s.modality != modality for s in samples):
            raise MalformedStreamError("mixed modalities in one stream")
        return cls(
            modality,
            [s.t_meas for s in samples],
            [s.t_avail for s in samples],
            [s.values for s in samples],
            source,
        )

    def __len__(self):
        return len(self.t_meas)

    def __getitem__(self, i):
        return SensorSample(
            float(self.t_meas[i]), float(self.t_avail[i]), self.modality,
            tuple(self.values[i]), self.source,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Stream):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.source == other.source
            and np.array_equal(self.t_meas, other.t_meas)
            and np.array_equal(self.t_avail, other.t_avail)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"Stream({self.modality!r}, n={len(self)}, source={self.source!r})"

    def select(self, mask):
        return Stream(self.modality, self.t_meas[mask], self.t_avail[mask], self.values[mask], self.source)

    def sorted(self):
        order = np.argsort(self.t_meas, kind="stable")
        return self.select(order)

    def is_monotone(self):
        return bool(np.all(np.diff(self.t_meas) > 0))


class StreamCollector:
    """Thread-safe sink for samples arriving from concurrent producers.

    Ordering is only finalised when :meth:`streams` is called.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._samples = defaultdict(list)

    def add(self, sample: SensorSample):
        with self._lock:
            self._samples[(sample.modality, sample.source)].append(sample)

    def extend(self, samples: Iterable[SensorSample]):
        for s in samples:
            self.add(s)

    def streams(self):
        with self._lock:
            groups = {k: list(v) for k, v in self._samples.items()}
        out = []
        for (modality, source) in sorted(groups):
            samples = sorted(groups[(modality, source)], key=lambda s: (s.t_meas, s.t_avail))
            out.append(Stream.from_samples(samples, modality, source))
        return out


# -- JSONL ------------------------------------------------------------------


def write_jsonl(streams, path):
    """Write all samples, ordered by (t_meas, modality, source), one object per line."""
    rows = []
    for st in streams:
        for i in range(len(st)):
            rows.append((float(st.t_meas[i]), st.modality, st.source, i, st))
    rows.sort(key=lambda r: r[:4])
    lines = []
    for t, modality, source, i, st in rows:
        obj = {
            "t_meas": t,
            "t_avail": float(st.t_avail[i]),
            "modality": modality,
            "values": [float(v) for v in st.values[i]],
            "source": source,
        }
        lines.append(json.dumps(obj, separators=(",", ":")))
    text = "\n".join(lines) + ("\n" if lines else "")
    Path(path).write_text(text, encoding="utf-8")


def read_jsonl(path):
    """Read a JSONL sample file back into streams grouped by (modality, source)."""
    groups = defaultdict(list)
    order = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sample = SensorSample(
                    float(obj["t_meas"]), float(obj["t_avail"]), obj["modality"],
                    tuple(obj["values"]), obj.get("source", ""),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise MalformedStreamError(f"{path}:{lineno}: {exc}") from exc
            key = (sample.modality, sample.source)
            if key not in groups:
                order.append(key)
            groups[key].append(sample)
    return [
        Stream.from_samples(sorted(groups[k], key=lambda s: s.t_meas), k[0], k[1])
        for k in order
    ]


# -- headings and deltas ------------------------------------------------------


def radio_heading(positions):
    """Direction of travel between consecutive 2D points.

    ``theta[k] = atan2(dy, dx)`` of the step k -> k+1; the last heading repeats
    and zero-length steps reuse the previous heading.
    """
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2 or p.shape[0] < 2:
        raise InsufficientDataError("radio_heading needs at least two points")
    d = np.diff(p[:, :2], axis=0)
    theta = np.arctan2(d[:, 1], d[:, 0])
    moving = np.hypot(d[:, 0], d[:, 1]) > 1e-12
    if not moving.any():
        theta[:] = 0.0
    else:
        # forward fill from the previous moving step; leading stationary steps take the first one
        idx = np.where(moving, np.arange(len(d)), -1)
        idx = np.maximum.accumulate(idx)
        idx[idx < 0] = int(np.argmax(moving))
        theta = theta[idx]
    return np.append(theta, theta[-1])


def position_deltas(segment):
    """Replace ``p_radio`` by per-tick directed deltas ``p[k] - p[k-1]`` (first tick zero)."""
    p = segment.channel("p_radio")
    delta = np.zeros_like(p)
    delta[1:] = p[1:] - p[:-1]
    ok = segment.valid("p_radio")
    codes = segment.validity["p_radio"].copy()
    both = np.ones_like(ok)
    both[1:] = ok[1:] & ok[:-1]
    codes[~both] = MISSING
    delta[~both] = np.nan
    if ok[0]:
        delta[0] = 0.0
    return segment.with_channel("p_radio", delta, codes)


def positions_from_deltas(deltas, start):
    """Inverse of :func:`position_deltas`: cumulative sum from ``start``."""
    d = np.asarray(deltas, dtype=float)
    return np.asarray(start, dtype=float) + np.cumsum(d, axis=0)


# -- segments -------------------------------------------------------------------


def _column_names(name, dim):
    if dim == 1:
        return [name]
    return [f"{name}_{ax}" for ax in "xyz"[:dim]]


@dataclass(frozen=True)
class Segment:
    """Channels resampled onto one uniform grid ``t0 + k / f_s``."""

    f_s: float
    t0: float
    channels: Mapping[str, np.ndarray]
    validity: Mapping[str, np.ndarray]
    ref: Trajectory | None = None
    segment_id: str = "segment"
    policy: str = "offline"

    def __post_init__(self):
        if self.f_s <= 0:
            raise ConfigError("f_s", "must be positive")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise MalformedStreamError("segment channels differ in length")
        chans, codes = {}, {}
        for name, values in self.channels.items():
            arr = np.asarray(values, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            chans[name] = arr
            c = self.validity.get(name)
            codes[name] = (
                np.where(np.isfinite(arr).all(axis=1), OBSERVED, MISSING).astype(np.int8)
                if c is None else np.asarray(c, dtype=np.int8)
            )
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "validity", codes)
        if self.ref is not None and len(self.ref) != self.n_ticks:
            raise MalformedStreamError("reference length differs from segment length")

    @property
    def n_ticks(self):
        if not self.channels:
            return 0 if self.ref is None else len(self.ref)
        return len(next(iter(self.channels.values())))

    def __len__(self):
        return self.n_ticks

    @property
    def times(self):
        return self.t0 + np.arange(self.n_ticks) / self.f_s

    def channel(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise MissingModalityError(f"segment has no channel {name!r}") from None

    def valid(self, name):
        self.channel(name)
        return self.validity[name] != MISSING

    def with_channel(self, name, values, validity=None):
        chans = dict(self.channels)
        codes = dict(self.validity)
        arr = np.asarray(values, dtype=float)
        chans[name] = arr[:, None] if arr.ndim == 1 else arr
        if validity is None:
            validity = np.where(np.isfinite(chans[name]).all(axis=1), OBSERVED, MISSING)
        codes[name] = np.asarray(validity, dtype=np.int8)
        return replace(self, channels=chans, validity=codes)

    def with_ref(self, ref):
        return replace(self, ref=ref)

    def slice(self, start, stop):
        chans = {k: v[start:stop] for k, v in self.channels.items()}
        codes = {k: v[start:stop] for k, v in self.validity.items()}
        ref = None if self.ref is None else self.ref.slice(start, stop)
        return replace(self, t0=float(self.times[start]) if self.n_ticks else self.t0,
                       channels=chans, validity=codes, ref=ref)

    # -- CSV ------------------------------------------------------------------

    def to_csv(self, path=None):
        """Columnar CSV: one row per tick. Returns the text when ``path`` is None."""
        names = list(self.channels)
        header = ["t"]
        for name in names:
            header += _column_names(name, self.channels[name].shape[1])
        header += [f"valid_{name}" for name in names]
        if self.ref is not None:
            header += ["ref_x", "ref_y", "ref_speed", "ref_heading", "ref_cum_distance"]
        meta = {
            "f_s": self.f_s, "t0": self.t0, "segment_id": self.segment_id, "policy": self.policy,
            "channels": {n: self.channels[n].shape[1] for n in names},
        }
        if self.ref is not None:
            meta["events"] = [list(e) for e in self.ref.events]
        buf = io.StringIO()
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        times = self.times
        for k in range(self.n_ticks):
            row = [repr(float(times[k]))]
            for name in names:
                row += [repr(float(v)) for v in self.channels[name][k]]
            row += [str(int(self.validity[name][k])) for name in names]
            if self.ref is not None:
                r = self.ref
                row += [repr(float(a[k])) for a in (r.x, r.y, r.speed, r.heading, r.cum_distance)]
            writer.writerow(row)
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None

    @classmethod
    def from_csv(cls, path_or_text):
        text = path_or_text
        if isinstance(path_or_text, Path) or "\n" not in str(path_or_text):
            text = Path(path_or_text).read_text(encoding="utf-8")
        first, _, rest = text.partition("\n")
        if not first.startswith("# "):
            raise MalformedStreamError("segment CSV lacks its metadata line")
        meta = json.loads(first[2:])
        reader = csv.reader(io.StringIO(rest))
        header = next(reader)
        rows = [r for r in reader if r]
        data = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(len(rows), len(header))
        col = {h: i for i, h in enumerate(header)}
        chans, codes = {}, {}
        for name, dim in meta["channels"].items():
            cols = [col[c] for c in _column_names(name, dim)]
            chans[name] = data[:, cols]
            codes[name] = data[:, col[f"valid_{name}"]].astype(np.int8)
        ref = None
        if "ref_x" in col:
            t = data[:, col["t"]]
            ref = Trajectory(
                t, data[:, col["ref_x"]], data[:, col["ref_y"]], data[:, col["ref_speed"]],
                data[:, col["ref_heading"]], data[:, col["ref_cum_distance"]],
                events=tuple(TurnEvent(*e) for e in meta.get("events", [])),
            )
        return cls(meta["f_s"], meta["t0"], chans, codes, ref, meta["segment_id"], meta["policy"])


# -- synchronisation --------------------------------------------------------------


def _merge(streams):
    """Merge same-modality streams from several sources into one t_meas-sorted stream."""
    if len(streams) == 1:
        st = streams[0]
        if not st.is_monotone():
            raise MalformedStreamError(f"{st.modality} stream {st.source!r} has non-monotone timestamps")
        return st
    for st in streams:
        if not st.is_monotone():
            raise MalformedStreamError(f"{st.modality} stream {st.source!r} has non-monotone timestamps")
    merged = Stream(
        streams[0].modality,
        np.concatenate([s.t_meas for s in streams]),
        np.concatenate([s.t_avail for s in streams]),
        np.concatenate([s.values for s in streams]),
        "+".join(s.source for s in streams),
    ).sorted()
    if not merged.is_monotone():
        raise MalformedStreamError(f"duplicate {merged.modality} timestamps across sources")
    return merged


def _resample_offline(grid, t_meas, values, angle=False):
    n, dim = len(grid), values.shape[1]
    out = np.full((n, dim), np.nan)
    codes = np.zeros(n, dtype=np.int8)
    if len(t_meas) == 0:
        return out, codes
    inside = (grid >= t_meas[0] - _TIME_TOL) & (grid <= t_meas[-1] + _TIME_TOL)
    g = np.clip(grid[inside], t_meas[0], t_meas[-1])
    if len(t_meas) == 1:
        out[inside] = values[0]
    elif angle:
        out[inside, 0] = interp_angle(g, t_meas, values[:, 0])
    else:
        for j in range(dim):
            out[inside, j] = np.interp(g, t_meas, values[:, j])
    idx = np.clip(np.searchsorted(t_meas, grid), 0, len(t_meas) - 1)
    prev = np.clip(idx - 1, 0, len(t_meas) - 1)
    exact = (np.abs(t_meas[idx] - grid) < _TIME_TOL) | (np.abs(t_meas[prev] - grid) < _TIME_TOL)
    codes[inside] = INTERPOLATED
    codes[inside & exact] = OBSERVED
    return out, codes


def _resample_realtime(grid, t_meas, t_avail, values):
    """Zero-order hold of the most recently *measured* sample already available at each tick."""
    n, dim = len(grid), values.shape[1]
    out = np.full((n, dim), np.nan)
    codes = np.zeros(n, dtype=np.int8)
    if len(t_meas) == 0:
        return out, codes
    order = np.argsort(t_avail, kind="stable")
    ta, tm = t_avail[order], t_meas[order]
    is_new = tm >= np.maximum.accumulate(tm)
    best = np.maximum.accumulate(np.where(is_new, np.arange(len(tm)), 0))
    j = np.searchsorted(ta, grid + _TIME_TOL, side="right") - 1
    ok = j >= 0
    chosen = np.full(n, -1)
    chosen[ok] = order[best[j[ok]]]
    out[ok] = values[chosen[ok]]
    changed = np.ones(n, dtype=bool)
    changed[1:] = chosen[1:] != chosen[:-1]
    codes[ok] = HELD
    codes[ok & changed] = OBSERVED
    return out, codes


def _radio_heading_stream(radio):
    """Headings of consecutive radio fixes, stamped at the later fix of each pair."""
    if len(radio) < 2:
        return None
    theta = radio_heading(radio.values)[:-1]
    t_avail = np.maximum(radio.t_avail[1:], radio.t_avail[:-1])
    return radio.t_meas[1:], t_avail, theta[:, None]


def synchronize(streams, f_s=100.0, policy="offline", t0=None, t_end=None,
                ref=None, segment_id="segment"):
    """Resample asynchronous streams onto one uniform grid.

    ``offline`` interpolates linearly between the two measurements bracketing
    each tick (by measurement time) and marks unbracketed ticks missing.
    ``realtime`` only uses samples whose availability time has passed and
    holds the most recently measured one (zero-order hold).

    ``ref`` (a :class:`Trajectory`) is resampled onto the grid when given.
    """
    if policy not in POLICIES:
        raise ConfigError("policy", f"expected one of {POLICIES}, got {policy!r}")
    if f_s <= 0:
        raise ConfigError("f_s", "must be positive")
    by_mod = defaultdict(list)
    for st in streams:
        by_mod[st.modality].append(st)
    radio_streams = [s for s in by_mod.get("radio_pos", []) if len(s)]
    if not radio_streams:
        raise MissingModalityError("synchronize needs radio position samples")
    if not any(by_mod.get(m) for m in ("accel", "gyro")):
        raise MissingModalityError("synchronize needs at least one IMU stream")
    merged = {m: _merge([s for s in sts]) for m, sts in by_mod.items() if any(len(s) for s in sts)}

    if t0 is None:
        t0 = min(float(s.t_meas[0]) for s in merged.values())
    if t_end is None:
        t_end = max(float(s.t_meas[-1]) for s in merged.values())
    n = int(math.floor((t_end - t0) * f_s + 1e-6)) + 1
    grid = t0 + np.arange(max(n, 0)) / f_s

    def resample(t_meas, t_avail, values, angle=False):
        if policy == "offline":
            return _resample_offline(grid, t_meas, values, angle)
        return _resample_realtime(grid, t_meas, t_avail, values)

    chans, codes = {}, {}
    sources = {
        "p_radio": "radio_pos", "v": "speed", "acc": "accel", "gyro": "gyro",
    }
    for chan, modality in sources.items():
        st = merged.get(modality)
        if st is None:
            chans[chan] = np.full((len(grid), CHANNEL_DIMS[chan]), np.nan)
            codes[chan] = np.zeros(len(grid), dtype=np.int8)
        else:
            chans[chan], codes[chan] = resample(st.t_meas, st.t_avail, st.values)
    heading = _radio_heading_stream(merged["radio_pos"])
    if heading is None:
        chans["theta_radio"] = np.full((len(grid), 1), np.nan)
        codes["theta_radio"] = np.zeros(len(grid), dtype=np.int8)
    else:
        chans["theta_radio"], codes["theta_radio"] = resample(*heading, angle=True)
    ref_grid = None if ref is None else ref.resample(grid)
    return Segment(float(f_s), float(t0), chans, codes, ref_grid, segment_id, policy)


# -- windows ------------------------------------------------------------------


@dataclass(frozen=True)
class WindowBundle:
    segment_id: str
    start_tick: int
    length: int
    channels: tuple
    horizon: float
    target_tick: int
    target: ReferencePose | None = None

    @property
    def end_tick(self):
        return self.start_tick + self.length - 1

    def inputs(self, segment):
        """Raw (possibly NaN) channel values of this window, channels concatenated."""
        cols = [segment.channel(c)[self.start_tick:self.start_tick + self.length] for c in self.channels]
        return np.concatenate(cols, axis=1)


def window_stride(n_w, overlap):
    return max(1, int(round(n_w * (1.0 - overlap))))


def window_count(n_ticks, n_w, overlap, horizon_ticks):
    span = n_ticks - n_w - horizon_ticks
    if span < 0:
        return 0
    return span // window_stride(n_w, overlap) + 1


def make_windows(segment, n_w=128, overlap=0.5, horizon=0.0, channels=None):
    """Slide windows of ``n_w`` ticks with the given fractional overlap.

    Each window's target is the reference pose ``horizon`` seconds after its
    last tick. Segments too short for a single window yield none.
    """
    if not 0 <= overlap < 1:
        raise ConfigError("overlap", "must lie in [0, 1)")
    if n_w < 2:
        raise ConfigError("window", "must be at least 2 ticks")
    if horizon < 0:
        raise ConfigError("horizon", "must be non-negative")
    h_ticks = int(round(horizon * segment.f_s))
    stride = window_stride(n_w, overlap)
    count = window_count(segment.n_ticks, n_w, overlap, h_ticks)
    channels = tuple(channels) if channels is not None else tuple(segment.channels)
    windows = []
    for w in range(count):
        start = w * stride
        tgt_tick = start + n_w - 1 + h_ticks
        target = segment.ref[tgt_tick] if segment.ref is not None else None
        windows.append(WindowBundle(segment.segment_id, start, n_w, channels, float(horizon), tgt_tick, target))
    return windows
