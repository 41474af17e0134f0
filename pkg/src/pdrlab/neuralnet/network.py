"""Feed-forward -> LSTM -> dropout -> feed-forward regressor on a flat parameter vector.

All parameters live in one float64 vector. :class:`ParamLayout` maps names to
views of it, which keeps the optimizer, gradient clipping, checkpointing and
finite-difference checks trivial.

LSTM gate blocks are ordered (input, forget, candidate, output).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, SpecError


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    ff_in_dims: tuple = (64,)
    lstm_layers: int = 1
    lstm_cells: int = 120
    dropout_rate: float = 0.5
    ff_out_dims: tuple = (2,)
    init_seed: int = 0
    forget_bias: float = 1.0
    aux_dim: int = 0  # extra head inputs concatenated to the (dropped-out) LSTM state

    def __post_init__(self):
        object.__setattr__(self, "ff_in_dims", tuple(int(d) for d in self.ff_in_dims))
        object.__setattr__(self, "ff_out_dims", tuple(int(d) for d in self.ff_out_dims))
        if self.input_dim < 1:
            raise ConfigError("input_dim", "must be >= 1")
        if self.aux_dim < 0:
            raise ConfigError("aux_dim", "must be >= 0")
        if self.lstm_layers < 1 or self.lstm_cells < 1:
            raise ConfigError("lstm_cells", "need at least one LSTM layer with one cell")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", "must lie in [0, 1)")
        if not self.ff_out_dims or any(d < 1 for d in self.ff_out_dims + self.ff_in_dims):
            raise ConfigError("ff_out_dims", "layer widths must be positive and end in the output size")

    @property
    def output_dim(self):
        return self.ff_out_dims[-1]

    def to_dict(self):
        d = asdict(self)
        d["ff_in_dims"] = list(self.ff_in_dims)
        d["ff_out_dims"] = list(self.ff_out_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class _Entry(NamedTuple):
    name: str
    shape: tuple
    offset: int
    regularized: bool

    @property
    def size(self):
        return math.prod(self.shape)


@dataclass(frozen=True)
class ParamLayout:
    """Deterministic ordering of every parameter tensor inside the flat vector."""

    entries: tuple
    size: int
    l2_mask: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def for_spec(cls, spec: NetworkSpec):
        shapes = []
        width = spec.input_dim
        for i, d in enumerate(spec.ff_in_dims):
            shapes += [(f"ff_in.{i}.W", (width, d), True), (f"ff_in.{i}.b", (d,), False)]
            width = d
        h = spec.lstm_cells
        for i in range(spec.lstm_layers):
            shapes += [
                (f"lstm.{i}.W", (width, 4 * h), True),
                (f"lstm.{i}.U", (h, 4 * h), True),
                (f"lstm.{i}.b", (4 * h,), False),
            ]
            width = h
        width += spec.aux_dim
        for i, d in enumerate(spec.ff_out_dims):
            shapes += [(f"ff_out.{i}.W", (width, d), True), (f"ff_out.{i}.b", (d,), False)]
            width = d
        entries, offset = [], 0
        for name, shape, reg in shapes:
            e = _Entry(name, shape, offset, reg)
            entries.append(e)
            offset += e.size
        mask = np.zeros(offset)
        for e in entries:
            if e.regularized:
                mask[e.offset:e.offset + e.size] = 1.0
        return cls(tuple(entries), offset, mask)

    def views(self, theta):
        """Name -> reshaped view into ``theta`` (writes go through)."""
        if theta.shape != (self.size,):
            raise SpecError(f"parameter vector has shape {theta.shape}, expected ({self.size},)")
        return {e.name: theta[e.offset:e.offset + e.size].reshape(e.shape) for e in self.entries}

    def names(self):
        return [e.name for e in self.entries]


def param_count(spec: NetworkSpec):
    return ParamLayout.for_spec(spec).size


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(spec: NetworkSpec, seed=None):
    rng = np.random.default_rng(spec.init_seed if seed is None else seed)
    layout = ParamLayout.for_spec(spec)
    theta = np.zeros(layout.size)
    P = layout.views(theta)
    h = spec.lstm_cells
    for e in layout.entries:
        kind = e.name.rsplit(".", 1)[1]
        if kind == "W":
            P[e.name][...] = _glorot(rng, *e.shape)
        elif kind == "U":
            P[e.name][...] = _orthogonal(rng, h, 4 * h)
        elif e.name.startswith("lstm"):
            P[e.name][h:2 * h] = spec.forget_bias
    return theta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


class _LstmCache(NamedTuple):
    # time-major: (T, B, .) so that per-step slices are contiguous
    x: np.ndarray      # (T, B, in)
    gates: np.ndarray  # (T, B, 4H) post-activation
    c: np.ndarray      # (T, B, H)
    tc: np.ndarray     # tanh(c)
    h: np.ndarray      # (T, B, H)


class ForwardCache(NamedTuple):
    ff_in: list
    lstm: list
    head_in: np.ndarray
    mask: np.ndarray | None
    ff_out: list
    output: np.ndarray


def _lstm_forward(x, W, U, b):
    T, B, _ = x.shape
    H = U.shape[0]
    gates = x @ W + b
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        g = gates[t]
        g += h @ U
        g[:, :2 * H] = _sigmoid(g[:, :2 * H])
        g[:, 3 * H:] = _sigmoid(g[:, 3 * H:])
        np.tanh(g[:, 2 * H:3 * H], out=g[:, 2 * H:3 * H])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = g[:, 3 * H:] * tc
        cs[t], tcs[t], hs[t] = c, tc, h
    return _LstmCache(x, gates, cs, tcs, hs)


def trunk(theta, X, spec: NetworkSpec, layout=None, keep=False):
    """Everything up to and including the last LSTM hidden state."""
    layout = layout or ParamLayout.for_spec(spec)
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[2] != spec.input_dim:
        raise SpecError(f"input of shape {X.shape} does not match input_dim={spec.input_dim}")
    P = layout.views(theta)
    a = np.ascontiguousarray(X.transpose(1, 0, 2))
    ff_cache = []
    for i in range(len(spec.ff_in_dims)):
        prev = a
        a = np.tanh(a @ P[f"ff_in.{i}.W"] + P[f"ff_in.{i}.b"])
        ff_cache.append((prev, a))
    lstm_cache = []
    for i in range(spec.lstm_layers):
        lc = _lstm_forward(a, P[f"lstm.{i}.W"], P[f"lstm.{i}.U"], P[f"lstm.{i}.b"])
        lstm_cache.append(lc)
        a = lc.h
    h_last = a[-1]
    if keep:
        return h_last, ff_cache, lstm_cache
    return h_last


def head(theta, h, spec: NetworkSpec, layout=None, keep=False, aux=None):
    """Downstream feed-forward stack; hidden layers tanh, last layer linear.

    Works on any leading batch shape, which lets MC dropout push ``(K, B, H)``
    through in one call.
    """
    layout = layout or ParamLayout.for_spec(spec)
    P = layout.views(theta)
    a = _with_aux(h, aux, spec)
    cache = []
    n = len(spec.ff_out_dims)
    for i in range(n):
        prev = a
        a = a @ P[f"ff_out.{i}.W"] + P[f"ff_out.{i}.b"]
        if i < n - 1:
            a = np.tanh(a)
        cache.append((prev, a))
    return (a, cache) if keep else a


def _with_aux(h, aux, spec):
    if spec.aux_dim == 0:
        if aux is not None and np.size(aux):
            raise SpecError("network takes no auxiliary head input")
        return h
    if aux is None:
        raise SpecError(f"network needs {spec.aux_dim} auxiliary head inputs")
    aux = np.broadcast_to(aux, h.shape[:-1] + (spec.aux_dim,))
    return np.concatenate([h, aux], axis=-1)


def forward(theta, X, spec: NetworkSpec, mask=None, return_cache=False, layout=None, aux=None):
    """Network output for a batch ``X`` of shape (B, T, input_dim).

    ``mask`` is an inverted-dropout mask of shape (B, lstm_cells) (train
    mode); ``None`` means inference.
    """
    layout = layout or ParamLayout.for_spec(spec)
    h_last, ff_cache, lstm_cache = trunk(theta, X, spec, layout, keep=True)
    d = h_last if mask is None else h_last * mask
    y, out_cache = head(theta, d, spec, layout, keep=True, aux=aux)
    if return_cache:
        return y, ForwardCache(ff_cache, lstm_cache, h_last, mask, out_cache, y)
    return y


def _lstm_backward(lc: _LstmCache, dhs, W, U):
    """BPTT through one LSTM layer given dL/dh_t for every t (time-major)."""
    T, B, H = lc.h.shape
    dz = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    UT = U.T
    for t in range(T - 1, -1, -1):
        g = lc.gates[t]
        i, f, cand, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = lc.tc[t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :H] = dc * cand * i * (1.0 - i)
        if t:
            d[:, H:2 * H] = dc * lc.c[t - 1] * f * (1.0 - f)
        else:
            d[:, H:2 * H] = 0.0
        d[:, 2 * H:3 * H] = dc * i * (1.0 - cand * cand)
        d[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ UT
    flat_dz = dz.reshape(-1, 4 * H)
    dW = lc.x.reshape(-1, lc.x.shape[2]).T @ flat_dz
    dU = lc.h[:-1].reshape(-1, H).T @ dz[1:].reshape(-1, 4 * H)
    db = flat_dz.sum(axis=0)
    dx = dz @ W.T
    return dx, dW, dU, db


def backward(theta, cache: ForwardCache, dy, spec: NetworkSpec, layout=None):
    """Gradient of a loss w.r.t. ``theta`` given dL/d(output)."""
    layout = layout or ParamLayout.for_spec(spec)
    P = layout.views(theta)
    grad = np.zeros_like(theta)
    G = layout.views(grad)
    da = dy
    for i in range(len(spec.ff_out_dims) - 1, -1, -1):
        prev, a = cache.ff_out[i]
        if i < len(spec.ff_out_dims) - 1:
            da = da * (1.0 - a * a)
        G[f"ff_out.{i}.W"][...] = prev.T @ da
        G[f"ff_out.{i}.b"][...] = da.sum(axis=0)
        da = da @ P[f"ff_out.{i}.W"].T
    da = da[:, :spec.lstm_cells]
    if cache.mask is not None:
        da = da * cache.mask
    top = cache.lstm[-1]
    dhs = np.zeros_like(top.h)
    dhs[-1] = da
    for i in range(spec.lstm_layers - 1, -1, -1):
        dhs, dW, dU, db = _lstm_backward(cache.lstm[i], dhs, P[f"lstm.{i}.W"], P[f"lstm.{i}.U"])
        G[f"lstm.{i}.W"][...] = dW
        G[f"lstm.{i}.U"][...] = dU
        G[f"lstm.{i}.b"][...] = db
    da = dhs
    for i in range(len(spec.ff_in_dims) - 1, -1, -1):
        prev, a = cache.ff_in[i]
        dz = da * (1.0 - a * a)
        G[f"ff_in.{i}.W"][...] = prev.reshape(-1, prev.shape[2]).T @ dz.reshape(-1, dz.shape[2])
        G[f"ff_in.{i}.b"][...] = dz.sum(axis=(0, 1))
        if i:
            da = dz @ P[f"ff_in.{i}.W"].T
    return grad


def loss_and_grad(theta, X, Y, spec: NetworkSpec, l2_weight=0.0, mask=None,
                  output_weights=None, layout=None, aux=None):
    """Batch-mean of 0.5*sum_j w_j (y_j - t_j)^2 plus l2_weight*||weights||^2.

    Biases are not regularised.
    """
    layout = layout or ParamLayout.for_spec(spec)
    y, cache = forward(theta, X, spec, mask=mask, return_cache=True, layout=layout, aux=aux)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != y.shape:
        raise SpecError(f"target shape {Y.shape} does not match output shape {y.shape}")
    w = np.ones(y.shape[1]) if output_weights is None else np.asarray(output_weights, dtype=float)
    err = y - Y
    B = len(y)
    data_loss = 0.5 * float(np.sum(w * err * err)) / B
    grad = backward(theta, cache, w * err / B, spec, layout)
    if l2_weight:
        reg = theta * layout.l2_mask
        data_loss += l2_weight * float(reg @ reg)
        grad += 2.0 * l2_weight * reg
    return data_loss, grad
