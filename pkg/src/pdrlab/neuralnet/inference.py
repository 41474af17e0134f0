"""Deterministic and Monte Carlo dropout prediction, and trajectory assembly."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, SpecError
from ..poses import PoseEstimate, PoseTrack
from .checkpoint import ModelCheckpoint
from .data import WindowSet, encode_windows
from .network import ParamLayout, dropout_mask, head, trunk
from .training import normalize


class McResult(NamedTuple):
    mean: np.ndarray       # (N, out) in target units
    var: np.ndarray        # (N, out)
    degenerate: bool


def _chunks(n, size):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def _norm_aux(ckpt, aux):
    return None if aux is None else normalize(np.asarray(aux, dtype=float), ckpt.aux_mean, ckpt.aux_std)


def hidden_states(ckpt: ModelCheckpoint, X, chunk=2048):
    """Last-tick LSTM state for raw window features ``X`` (deterministic)."""
    spec, layout = ckpt.spec, ParamLayout.for_spec(ckpt.spec)
    X = np.asarray(X, dtype=float)
    out = np.empty((len(X), spec.lstm_cells))
    for sl in _chunks(len(X), chunk):
        out[sl] = trunk(ckpt.theta, normalize(X[sl], ckpt.x_mean, ckpt.x_std), spec, layout)
    return out


def head_outputs(ckpt: ModelCheckpoint, h, aux=None):
    """Head applied to hidden states (any leading shape), in target units."""
    spec = ckpt.spec
    y = head(ckpt.theta, h, spec, aux=_norm_aux(ckpt, aux))
    return y * ckpt.y_std + ckpt.y_mean


def predict_windows(ckpt: ModelCheckpoint, X, aux=None, chunk=2048):
    """Dropout-free outputs in target units for raw window features ``X``."""
    return head_outputs(ckpt, hidden_states(ckpt, X, chunk), aux)


def mc_dropout(ckpt: ModelCheckpoint, X, passes, seed=0, aux=None, chunk=1024):
    """Sample mean and per-output variance over ``passes`` dropout masks.

    The recurrent trunk is deterministic, so it is evaluated once per window
    and only the masked head is repeated.
    """
    if passes < 1:
        raise ConfigError("passes", "must be >= 1")
    spec = ckpt.spec
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    mean = np.empty((len(X), spec.output_dim))
    var = np.empty_like(mean)
    for sl in _chunks(len(X), chunk):
        h = hidden_states(ckpt, X[sl])
        if spec.dropout_rate == 0.0:
            mean[sl] = head_outputs(ckpt, h, None if aux is None else aux[sl])
            var[sl] = 0.0
            continue
        masks = dropout_mask(rng, (passes,) + h.shape, spec.dropout_rate)
        y = head_outputs(ckpt, h[None] * masks, None if aux is None else aux[sl])
        mean[sl] = y.mean(axis=0)
        var[sl] = y.var(axis=0) if passes > 1 else 0.0
    return McResult(mean, var, passes == 1)


def mc_dropout_predict(windows, ckpt: ModelCheckpoint, passes=20, seed=0):
    """MC dropout estimate.

    Given a :class:`WindowSet` from an absolute-mode model, returns a
    :class:`PoseTrack` of absolute positions. Given a single raw window of
    shape (n_w, input_dim), returns a :class:`PoseEstimate` of the model
    output itself.
    """
    if isinstance(windows, WindowSet):
        if ckpt.spec.aux_dim:
            raise SpecError("delta-mode models need predict_trajectory for absolute positions")
        res = mc_dropout(ckpt, windows.X, passes, seed)
        return PoseTrack(windows.target_t, windows.anchor + res.mean[:, :2], res.var[:, :2],
                         ckpt.encoding.horizon)
    X = np.asarray(windows, dtype=float)
    if X.ndim != 2:
        raise SpecError("expected a WindowSet or a single (n_w, input_dim) window")
    aux = np.zeros((1, ckpt.spec.aux_dim)) if ckpt.spec.aux_dim else None
    res = mc_dropout(ckpt, X[None], passes, seed, aux=aux)
    return PoseEstimate(float("nan"), tuple(res.mean[0]), tuple(res.var[0]), ckpt.encoding.horizon, res.degenerate)


def predict_trajectory(segment, ckpt: ModelCheckpoint, horizon=None, output_mode=None, stride=1,
                       mc_passes=0, seed=0, start=None, delta_fn=None):
    """Slide the model over ``segment`` and return absolute position estimates.

    Absolute models add each window's prediction to its radio anchor. Delta
    models run closed loop at a one-step stride, accumulating predicted
    displacements from ``start`` (default: the first window's radio anchor);
    ``stride`` then only thins the returned track. ``delta_fn`` replaces the
    head for delta models (used to test the accumulation itself).
    """
    enc = ckpt.encoding
    if horizon is not None and abs(horizon - enc.horizon) > 1e-9:
        raise SpecError(f"checkpoint was trained for horizon {enc.horizon} s, not {horizon} s")
    if output_mode is not None and output_mode != enc.output_mode:
        raise SpecError(f"checkpoint predicts {enc.output_mode!r} outputs, not {output_mode!r}")
    if stride < 1:
        raise ConfigError("stride", "must be >= 1")
    if enc.output_mode == "absolute":
        ws = encode_windows(segment, enc, stride=stride, with_targets=False)
        if mc_passes:
            res = mc_dropout(ckpt, ws.X, mc_passes, seed)
            y, var = res.mean[:, :2], res.var[:, :2]
        else:
            y = predict_windows(ckpt, ws.X)[:, :2]
            var = np.zeros_like(y)
        return PoseTrack(ws.target_t, ws.anchor + y, var, enc.horizon)

    ws = encode_windows(segment, enc, stride=enc.delta_step, with_targets=False)
    passes = max(1, mc_passes)
    h = hidden_states(ckpt, ws.X)
    rng = np.random.default_rng(seed)
    p0 = ws.anchor[0] if start is None else np.asarray(start, dtype=float)
    pos = np.tile(p0, (passes, 1))
    mean = np.empty((len(ws), 2))
    var = np.zeros((len(ws), 2))
    for k in range(len(ws)):
        if delta_fn is not None:
            d = np.asarray(delta_fn(k, pos), dtype=float).reshape(-1, 2)
        else:
            hk = h[k] if not mc_passes else h[k] * dropout_mask(rng, (passes, h.shape[1]), ckpt.spec.dropout_rate)
            d = head_outputs(ckpt, np.broadcast_to(hk, (passes, h.shape[1])), pos - ws.anchor[k])[:, :2]
        pos = pos + d
        mean[k] = pos.mean(axis=0)
        if passes > 1:
            var[k] = pos.var(axis=0)
    keep = slice(None, None, stride)
    return PoseTrack(ws.target_t[keep], mean[keep], var[keep], enc.horizon)
