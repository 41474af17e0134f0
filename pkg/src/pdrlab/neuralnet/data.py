"""Turning synchronised segments into network-ready window tensors.

Per tick, each selected channel contributes its features, followed by one
validity flag per channel. Invalid ticks are zero-imputed. Angles enter as
(cos, sin) so that wrap-around does not create jumps.

Radio positions are made translation invariant by expressing them relative
to an anchor, the most recent radio fix at the window end.

``absolute`` mode regresses the target position minus the anchor.
``delta`` mode regresses the directed distance from the previous position
estimate to the target. The previous estimate, relative to the anchor,
reaches the output head as an auxiliary input. During training it is the
reference position ``delta_step`` ticks before the target plus Gaussian
jitter. During prediction it is the model's own previous output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ConfigError, InsufficientDataError, SpecError
from ..streams import CHANNEL_DIMS, window_stride

OUTPUT_MODES = ("absolute", "delta")
FEATURE_WIDTH = {"p_radio": 2, "theta_radio": 2, "theta_ori": 2, "v": 1, "acc": 3, "gyro": 1}


@dataclass(frozen=True)
class WindowEncoding:
    channels: tuple = ("p_radio", "v", "theta_ori")
    n_w: int = 128
    horizon: float = 0.0
    f_s: float = 100.0
    output_mode: str = "absolute"
    delta_step: int = 1
    delta_jitter: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        unknown = [c for c in self.channels if c not in CHANNEL_DIMS]
        if unknown:
            raise ConfigError("channels", f"unknown channels {unknown}")
        if "p_radio" not in self.channels:
            raise ConfigError("channels", "p_radio is required to anchor position estimates")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigError("channels", "duplicate channel")
        if self.n_w < 2:
            raise ConfigError("window", "must be at least 2 ticks")
        if self.horizon < 0:
            raise ConfigError("horizon", "must be non-negative")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError("output_mode", f"expected one of {OUTPUT_MODES}")
        if self.delta_step < 1:
            raise ConfigError("delta_step", "must be >= 1 tick")
        if self.delta_jitter < 0:
            raise ConfigError("delta_jitter", "must be >= 0")

    @property
    def horizon_ticks(self):
        return int(round(self.horizon * self.f_s))

    @property
    def input_dim(self):
        return sum(FEATURE_WIDTH[c] for c in self.channels) + len(self.channels)

    @property
    def aux_dim(self):
        return 2 if self.output_mode == "delta" else 0

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class WindowSet(NamedTuple):
    X: np.ndarray          # (N, n_w, input_dim)
    Y: np.ndarray | None   # (N, 2) regression target
    anchor: np.ndarray     # (N, 2) last radio fix of each window
    start: np.ndarray      # window start ticks
    target_tick: np.ndarray
    target_t: np.ndarray   # time the estimate refers to
    aux: np.ndarray | None = None  # (N, 2) previous estimate minus anchor (delta mode)

    def __len__(self):
        return len(self.X)

    def replace(self, **changes):
        # _replace would check len(), which here counts windows rather than fields
        return WindowSet(**{**self._asdict(), **changes})

    def subset(self, idx):
        return WindowSet(*(None if f is None else f[idx] for f in self))


def window_starts(n_ticks, n_w, stride, horizon_ticks=0):
    span = n_ticks - n_w - horizon_ticks
    if span < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(span // stride + 1, dtype=np.int64) * stride


def last_valid_index(ok):
    """Index of the latest valid tick at or before each tick (-1 when none)."""
    idx = np.where(ok, np.arange(len(ok)), -1)
    return np.maximum.accumulate(idx)


def tick_features(segment, encoding: WindowEncoding):
    """Per-tick features before radio re-referencing; returns (F, radio, radio_ok)."""
    cols, masks = [], []
    for name in encoding.channels:
        if name not in segment.channels:
            raise SpecError(f"segment lacks input channel {name!r}")
        vals = segment.channels[name]
        ok = segment.valid(name) & np.isfinite(vals).all(axis=1)
        if name in ("theta_radio", "theta_ori"):
            vals = np.column_stack([np.cos(vals[:, 0]), np.sin(vals[:, 0])])
        cols.append(np.where(ok[:, None], np.nan_to_num(vals), 0.0))
        masks.append(ok.astype(float)[:, None])
    F = np.concatenate(cols + masks, axis=1)
    radio = segment.channels["p_radio"]
    radio_ok = segment.valid("p_radio") & np.isfinite(radio).all(axis=1)
    return F, np.nan_to_num(radio), radio_ok


def radio_column(encoding: WindowEncoding):
    col = 0
    for c in encoding.channels:
        if c == "p_radio":
            return col
        col += FEATURE_WIDTH[c]
    raise SpecError("p_radio missing from encoding")


def encode_windows(segment, encoding: WindowEncoding, stride=1, starts=None, with_targets=True, rng=None):
    """Window tensors for ``segment``.

    Windows that contain no valid radio fix are dropped. ``rng`` drives the
    delta-mode jitter and defaults to a fixed seed.
    """
    if segment.f_s != encoding.f_s:
        raise SpecError(f"segment rate {segment.f_s} Hz differs from encoding rate {encoding.f_s} Hz")
    n_w, h = encoding.n_w, encoding.horizon_ticks
    if starts is None:
        starts = window_starts(segment.n_ticks, n_w, stride, h)
    starts = np.asarray(starts, dtype=np.int64)
    F, radio, radio_ok = tick_features(segment, encoding)
    anchor_idx = last_valid_index(radio_ok)[starts + n_w - 1]
    keep = anchor_idx >= starts
    starts, anchor_idx = starts[keep], anchor_idx[keep]
    anchor = radio[anchor_idx]
    idx = starts[:, None] + np.arange(n_w)
    X = F[idx]
    pcol = radio_column(encoding)
    rel = radio[idx] - anchor[:, None, :]
    X[:, :, pcol:pcol + 2] = np.where(radio_ok[idx][..., None], rel, 0.0)
    target_tick = starts + n_w - 1 + h
    target_t = segment.t0 + target_tick / segment.f_s
    if not with_targets:
        return WindowSet(X, None, anchor, starts, target_tick, target_t)
    if segment.ref is None:
        raise InsufficientDataError("segment has no reference trajectory for targets")
    ref = segment.ref.positions
    if encoding.output_mode == "absolute":
        return WindowSet(X, ref[target_tick] - anchor, anchor, starts, target_tick, target_t)
    rng = rng if rng is not None else np.random.default_rng(0)
    prev = ref[np.maximum(target_tick - encoding.delta_step, 0)]
    prev = prev + rng.normal(0.0, encoding.delta_jitter, size=prev.shape)
    return WindowSet(X, ref[target_tick] - prev, anchor, starts, target_tick, target_t, prev - anchor)


def training_windows(segments, encoding: WindowEncoding, overlap=0.5, stride=None, seed=0):
    """Concatenate windows from several segments (stride ``n_w * (1 - overlap)`` by default)."""
    stride = stride or window_stride(encoding.n_w, overlap)
    rng = np.random.default_rng(seed)
    parts = [encode_windows(s, encoding, stride=stride, rng=rng) for s in segments]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise InsufficientDataError("no complete windows in the given segments")
    fields = []
    for i in range(len(WindowSet._fields)):
        col = [p[i] for p in parts]
        fields.append(None if col[0] is None else np.concatenate(col))
    return WindowSet(*fields)
