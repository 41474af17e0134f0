"""Position error statistics and post-event settling times."""

from __future__ import annotations

import math
import statistics
from typing import NamedTuple

import numpy as np

from ..errors import AlignmentError, EmptyInputError
from ..poses import PoseTrack
from ..trajectory import Trajectory


class ErrorReport(NamedTuple):
    errors: np.ndarray
    mae: float
    mse: float
    rmse: float
    cep95: float
    n: int

    def as_dict(self):
        return {"n": self.n, "mae": self.mae, "mse": self.mse, "rmse": self.rmse, "cep95": self.cep95}


def _as_times_xy(obj):
    if isinstance(obj, PoseTrack):
        return obj.t, obj.mean
    if isinstance(obj, Trajectory):
        return obj.t, obj.positions
    t, xy = obj
    return np.asarray(t, dtype=float), np.asarray(xy, dtype=float).reshape(-1, 2)


def align(est, ref, f_s=None):
    """Match each estimate to the nearest reference sample within half a tick.

    Returns (estimate indices, reference indices). Estimates without a
    partner are dropped; no partner at all raises :class:`AlignmentError`.
    """
    t_est, _ = _as_times_xy(est)
    t_ref, _ = _as_times_xy(ref)
    if len(t_est) == 0 or len(t_ref) == 0:
        raise EmptyInputError("cannot align empty trajectories")
    if f_s is None:
        f_s = 1.0 / float(np.median(np.diff(t_ref))) if len(t_ref) > 1 else 1.0
    tol = 0.5 / f_s + 1e-9
    j = np.clip(np.searchsorted(t_ref, t_est), 1, max(len(t_ref) - 1, 1))
    j = np.where(np.abs(t_ref[j - 1] - t_est) <= np.abs(t_ref[np.minimum(j, len(t_ref) - 1)] - t_est), j - 1, j)
    j = np.minimum(j, len(t_ref) - 1)
    ok = np.abs(t_ref[j] - t_est) <= tol
    if not ok.any():
        raise AlignmentError("estimate and reference time ranges do not overlap")
    return np.flatnonzero(ok), j[ok]


def position_errors(est, ref, f_s=None, return_times=False):
    """Euclidean distance between estimated and reference positions at matched times."""
    i, j = align(est, ref, f_s)
    t_est, xy_est = _as_times_xy(est)
    _, xy_ref = _as_times_xy(ref)
    d = xy_est[i] - xy_ref[j]
    err = np.hypot(d[:, 0], d[:, 1])
    return (t_est[i], err) if return_times else err


def cep95_index(n):
    """1-based rank of the 95th-percentile order statistic, ceil(0.95 n), in integer arithmetic."""
    return (95 * n + 99) // 100


def summarize(errors):
    e = np.asarray(errors, dtype=float).ravel()
    n = len(e)
    if n == 0:
        raise EmptyInputError("summarize needs at least one error sample")
    # statistics.mean is exact up to one final rounding, so results do not depend on sample order
    mae = float(statistics.mean(e.tolist()))
    mse = float(statistics.mean((e * e).tolist()))
    # lifts one-ulp inversions such as sqrt(fl(c*c)) < c on constant inputs
    rmse = max(math.sqrt(mse), mae)
    cep = float(np.sort(e)[cep95_index(n) - 1])
    return ErrorReport(e, mae, mse, rmse, cep, n)


def settling_time(t, errors, event_times, threshold=0.3, hold=0.2, window=None):
    """Seconds from each event until the error has come back under ``threshold``.

    If the error never reaches the threshold after the event the settling
    time is 0. Otherwise it is measured to the first moment, after the
    excursion began, from which the error stays below the threshold for at
    least ``hold`` seconds. Events that never settle (within ``window``
    seconds, if given) yield NaN.
    """
    t = np.asarray(t, dtype=float)
    e = np.asarray(errors, dtype=float)
    below = e < threshold
    n = len(t)
    # index of the first non-below sample at or after each index
    bad = np.where(~below, np.arange(n), n)
    next_bad = np.minimum.accumulate(bad[::-1])[::-1] if n else bad
    out = []
    for te in event_times:
        i0 = int(np.searchsorted(t, te - 1e-9))
        stop = n if window is None else int(np.searchsorted(t, te + window + 1e-9))
        if i0 >= stop:
            out.append(math.nan)
            continue
        above = np.flatnonzero(~below[i0:stop])
        if len(above) == 0:
            out.append(0.0)
            continue
        i = i0 + int(above[0])
        result = math.nan
        while i < stop:
            if below[i]:
                run_end = next_bad[i] - 1
                if t[run_end] - t[i] >= hold - 1e-9:
                    result = float(t[i] - te)
                    break
                i = run_end + 1
            else:
                i = _next_below(below, i)
        out.append(result)
    return out


def _next_below(below, i):
    nz = np.flatnonzero(below[i:])
    return i + int(nz[0]) if len(nz) else len(below)
