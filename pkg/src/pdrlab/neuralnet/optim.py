"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from ..errors import SpecError

log = logging.getLogger(__name__)


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0, 0)


def clip_by_global_norm(grad, max_norm):
    """Scale ``grad`` so its L2 norm is at most ``max_norm``; returns (grad, original norm)."""
    norm = float(np.sqrt(grad @ grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


def adam_step(theta, grad, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip=1.0):
    """One bias-corrected Adam update. Returns (new theta, new state).

    A non-finite gradient leaves weights and moments untouched and counts a
    skipped step.
    """
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise SpecError("optimizer state does not match parameter vector")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient at step %d; update skipped", state.t + 1)
        return theta, state._replace(skipped=state.skipped + 1)
    g, _ = clip_by_global_norm(grad, clip)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, t, state.skipped)
