"""Reference trajectories and small angle helpers used across the package."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), TWO_PI)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def interp_angle(t_new, t, angles):
    """Interpolate headings on the unit circle (sin/cos, renormalized)."""
    s = np.interp(t_new, t, np.sin(angles))
    c = np.interp(t_new, t, np.cos(angles))
    return np.arctan2(s, c)


class ReferencePose(NamedTuple):
    t: float
    x: float
    y: float
    speed: float
    heading: float
    cum_distance: float


class TurnEvent(NamedTuple):
    """An injected abrupt direction change starting at ``t`` with total turn ``angle`` (rad)."""

    t: float
    angle: float


@dataclass(frozen=True)
class Trajectory:
    """Ground-truth poses on a uniform grid, stored column-wise.

    Indexing yields :class:`ReferencePose` rows, so the object behaves like a
    sequence of poses while the arrays stay available for vectorised work.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    cum_distance: np.ndarray
    turn_rate: np.ndarray | None = None
    events: tuple[TurnEvent, ...] = field(default=())

    def __post_init__(self):
        for name in ("t", "x", "y", "speed", "heading", "cum_distance"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.turn_rate is not None:
            tr = np.asarray(self.turn_rate, dtype=float)
            tr.setflags(write=False)
            object.__setattr__(self, "turn_rate", tr)
        n = len(self.t)
        if any(len(getattr(self, k)) != n for k in ("x", "y", "speed", "heading", "cum_distance")):
            raise ValueError("trajectory columns differ in length")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.slice(i.start or 0, len(self) if i.stop is None else i.stop)
        return ReferencePose(
            float(self.t[i]), float(self.x[i]), float(self.y[i]),
            float(self.speed[i]), float(self.heading[i]), float(self.cum_distance[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def positions(self):
        return np.column_stack([self.x, self.y])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self) > 1 else 0.0

    def slice(self, start, stop):
        t = self.t[start:stop]
        events = tuple(e for e in self.events if len(t) and t[0] <= e.t <= t[-1])
        return Trajectory(
            t, self.x[start:stop], self.y[start:stop], self.speed[start:stop],
            self.heading[start:stop], self.cum_distance[start:stop],
            None if self.turn_rate is None else self.turn_rate[start:stop], events,
        )

    def resample(self, times):
        """Linear resampling onto ``times`` (headings on the unit circle)."""
        times = np.asarray(times, dtype=float)
        turn_rate = None if self.turn_rate is None else np.interp(times, self.t, self.turn_rate)
        events = tuple(e for e in self.events if len(times) and times[0] <= e.t <= times[-1])
        return Trajectory(
            times,
            np.interp(times, self.t, self.x),
            np.interp(times, self.t, self.y),
            np.interp(times, self.t, self.speed),
            interp_angle(times, self.t, self.heading),
            np.interp(times, self.t, self.cum_distance),
            turn_rate,
            events,
        )


_REF_COLUMNS = ("t", "x", "y", "speed", "heading", "cum_distance")


def reference_to_csv(ref: Trajectory, path=None):
    """CSV with one pose per row; turn events go on a leading ``#`` metadata line."""
    buf = io.StringIO()
    buf.write("# " + json.dumps({"events": [list(e) for e in ref.events]}) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_REF_COLUMNS)
    cols = [getattr(ref, c) for c in _REF_COLUMNS]
    for k in range(len(ref)):
        w.writerow([repr(float(c[k])) for c in cols])
    if path is None:
        return buf.getvalue()
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return None


def reference_from_csv(path):
    first, _, rest = Path(path).read_text(encoding="utf-8").partition("\n")
    meta = json.loads(first[2:]) if first.startswith("# ") else {}
    rows = list(csv.DictReader(io.StringIO(rest)))
    cols = {c: np.array([float(r[c]) for r in rows]) for c in _REF_COLUMNS}
    return Trajectory(**cols, events=tuple(TurnEvent(*e) for e in meta.get("events", [])))
