"""Pose estimates emitted by every estimator."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


class PoseEstimate(NamedTuple):
    t: float
    mean: tuple
    var: tuple
    horizon: float = 0.0
    degenerate: bool = False


@dataclass(frozen=True)
class PoseTrack:
    """A time series of 2D pose estimates; ``t`` is the time each estimate refers to."""

    t: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    horizon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1, 2))
        var = np.zeros_like(self.mean) if self.var is None else np.asarray(self.var, dtype=float)
        object.__setattr__(self, "var", var.reshape(-1, 2))
        if not (len(self.t) == len(self.mean) == len(self.var)):
            raise ValueError("pose track columns differ in length")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return PoseEstimate(float(self.t[i]), tuple(self.mean[i]), tuple(self.var[i]), self.horizon)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "var_x", "var_y"])
        for k in range(len(self)):
            w.writerow([repr(float(v)) for v in (self.t[k], *self.mean[k], *self.var[k])])
        if path is None:
            return buf.getvalue()
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
        return None

    @classmethod
    def from_csv(cls, path, horizon=0.0):
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        arr = np.array([[float(r[k]) for k in ("t", "x", "y", "var_x", "var_y")] for r in rows]).reshape(-1, 5)
        return cls(arr[:, 0], arr[:, 1:3], arr[:, 3:5], horizon)
