"""Mini-batch training with Adam, step-wise learning-rate halving and early stopping."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, InsufficientDataError
from .checkpoint import ModelCheckpoint
from .data import WindowEncoding, WindowSet
from .network import NetworkSpec, ParamLayout, dropout_mask, forward, init_params, loss_and_grad
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_halve_every: int = 10
    lr_factor: float = 0.5
    batch: int = 1024
    max_epochs: int = 100
    patience: int = 10
    l2_weight: float = 1e-6
    grad_clip: float = 1.0
    shuffle: bool = True
    seed: int = 0
    validation_fraction: float = 0.2
    normalize_inputs: bool = True
    normalize_targets: bool = True

    def __post_init__(self):
        positive = ("lr", "eps", "lr_factor", "grad_clip")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be strictly positive")
        for name in ("batch", "max_epochs", "lr_halve_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience", "must be >= 0")
        if self.l2_weight < 0:
            raise ConfigError("l2_weight", "must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "Adam decay rates must lie in [0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction", "must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training option")
        return cls(**d)


class EpochRecord(NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    best_val: float


class TrainResult(NamedTuple):
    checkpoint: ModelCheckpoint
    history: list
    stopped_early: bool


def feature_stats(X, enabled=True):
    """Per-feature mean/std over windows and ticks; constant features get std 1."""
    d = X.shape[-1]
    if not enabled:
        return np.zeros(d), np.ones(d)
    flat = X.reshape(-1, d)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def normalize(X, mean, std):
    return (X - mean) / std


def split_validation(windows: WindowSet, fraction):
    """Hold out the trailing ``fraction`` of windows (contiguous in time)."""
    n = len(windows)
    n_val = max(1, int(round(n * fraction)))
    if n - n_val < 1:
        raise InsufficientDataError("need at least one training and one validation window")
    cut = n - n_val
    return windows.subset(slice(0, cut)), windows.subset(slice(cut, n))


def _data_loss(theta, X, Y, spec, layout, aux=None, chunk=4096):
    total = 0.0
    for i in range(0, len(X), chunk):
        a = None if aux is None else aux[i:i + chunk]
        err = forward(theta, X[i:i + chunk], spec, layout=layout, aux=a) - Y[i:i + chunk]
        total += 0.5 * float(np.sum(err * err))
    return total / len(X)


def _init_delta_head(theta, spec, layout, aux_std, y_std):
    """Start a linear delta head at ``delta = -previous_offset``.

    With that weight block the model initially ignores its previous estimate
    and reproduces an anchor-relative prediction; training then learns how
    far to trust the previous estimate. Without it Adam needs far more steps
    to grow these weights, and a closed loop run with a half-trained head
    can be unstable. Multi-layer heads are left at their random start.
    """
    if len(spec.ff_out_dims) != 1 or spec.aux_dim != spec.output_dim:
        return
    W = layout.views(theta)["ff_out.0.W"]
    W[spec.lstm_cells:, :] = -np.diag(aux_std / y_std)


def train(windows: WindowSet, spec: NetworkSpec, config: TrainConfig = TrainConfig(),
          encoding: WindowEncoding | None = None, validation: WindowSet | None = None,
          theta0=None, metadata=None):
    """Fit a network; returns the best-validation checkpoint and per-epoch history."""
    if validation is None:
        if len(windows) < 2:
            raise ConfigError("windows", "need at least one training and one validation window")
        windows, validation = split_validation(windows, config.validation_fraction)
    if len(windows) < 1 or len(validation) < 1:
        raise ConfigError("windows", "training and validation splits must be non-empty")
    if windows.Y is None or validation.Y is None:
        raise ConfigError("windows", "training windows need targets")
    encoding = encoding or WindowEncoding()
    if spec.input_dim != windows.X.shape[2]:
        raise ConfigError("input_dim", f"network expects {spec.input_dim} features, data has {windows.X.shape[2]}")
    aux_dim = 0 if windows.aux is None else windows.aux.shape[1]
    if spec.aux_dim != aux_dim:
        raise ConfigError("aux_dim", f"network expects {spec.aux_dim} auxiliary inputs, data has {aux_dim}")

    x_mean, x_std = feature_stats(windows.X, config.normalize_inputs)
    if config.normalize_targets:
        y_mean, y_std = windows.Y.mean(axis=0), windows.Y.std(axis=0)
        y_std[y_std < 1e-12] = 1.0
    else:
        y_mean, y_std = np.zeros(spec.output_dim), np.ones(spec.output_dim)
    X = normalize(windows.X, x_mean, x_std)
    Y = normalize(windows.Y, y_mean, y_std)
    Xv = normalize(validation.X, x_mean, x_std)
    Yv = normalize(validation.Y, y_mean, y_std)
    if aux_dim:
        aux_mean, aux_std = feature_stats(windows.aux, config.normalize_inputs)
        A, Av = normalize(windows.aux, aux_mean, aux_std), normalize(validation.aux, aux_mean, aux_std)
    else:
        aux_mean = aux_std = np.zeros(0)
        A = Av = None

    layout = ParamLayout.for_spec(spec)
    if theta0 is None:
        theta = init_params(spec)
        if aux_dim:
            _init_delta_head(theta, spec, layout, aux_std, y_std)
    else:
        theta = np.array(theta0, dtype=float)
    state = AdamState.zeros(layout.size)
    rng = np.random.default_rng(config.seed)
    n = len(X)

    best_val = _data_loss(theta, Xv, Yv, spec, layout, Av)
    best_theta, best_epoch = theta.copy(), 0
    history, bad, stopped = [], 0, False
    for epoch in range(1, config.max_epochs + 1):
        lr = config.lr * config.lr_factor ** ((epoch - 1) // config.lr_halve_every)
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, config.batch):
            idx = order[s:s + config.batch]
            mask = dropout_mask(rng, (len(idx), spec.lstm_cells), spec.dropout_rate)
            loss, grad = loss_and_grad(theta, X[idx], Y[idx], spec, config.l2_weight, mask, layout=layout,
                                       aux=None if A is None else A[idx])
            theta, state = adam_step(theta, grad, state, lr, config.beta1, config.beta2, config.eps,
                                     config.grad_clip)
            total += loss * len(idx)
        val = _data_loss(theta, Xv, Yv, spec, layout, Av)
        if val < best_val:
            best_val, best_theta, best_epoch, bad = val, theta.copy(), epoch, 0
        else:
            bad += 1
        history.append(EpochRecord(epoch, lr, total / n, val, best_val))
        log.debug("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, total / n, val)
        if bad > config.patience:
            stopped = True
            break

    meta = {
        "epochs": len(history),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "train_loss": [h.train_loss for h in history],
        "val_loss": [h.val_loss for h in history],
        "seed": config.seed,
        "n_train": int(n),
        "n_val": int(len(Xv)),
        "skipped_steps": int(state.skipped),
        "train_config": config.to_dict(),
    }
    meta.update(metadata or {})
    ckpt = ModelCheckpoint(spec, encoding, best_theta, x_mean, x_std, y_mean, y_std, aux_mean, aux_std, meta)
    return TrainResult(ckpt, history, stopped)
