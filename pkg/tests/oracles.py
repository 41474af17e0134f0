"""Independent reference computations shared by unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np


def numeric_gradient(f, theta, idx, eps=1e-5):
    """Central differences of scalar ``f`` at the coordinates ``idx``."""
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        out[k] = (f(tp) - f(tm)) / (2 * eps)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_cep95(errors):
    """Smallest observed error with at least 95% of samples at or below it."""
    e = sorted(float(x) for x in errors)
    n = len(e)
    for x in e:
        if sum(1 for y in e if y <= x) * 100 >= 95 * n:
            return x
    return e[-1]


def brute_force_summary(errors):
    e = [float(x) for x in errors]
    mse = exact_mean([x * x for x in e])
    return {"mae": exact_mean(e), "mse": mse, "rmse": math.sqrt(mse), "cep95": brute_force_cep95(e)}


def exact_mean(values):
    """Correctly rounded mean via rational arithmetic."""
    total = sum(Fraction(float(v)) for v in values)
    return float(total / len(values))
