"""Recurrent fusion network: model, training, checkpoints and prediction."""

from .checkpoint import FORMAT_VERSION, ModelCheckpoint, load_checkpoint, save_checkpoint
from .data import OUTPUT_MODES, WindowEncoding, WindowSet, encode_windows, training_windows, window_starts
from .inference import hidden_states, mc_dropout, mc_dropout_predict, predict_trajectory, predict_windows
from .network import (
    NetworkSpec,
    ParamLayout,
    backward,
    dropout_mask,
    forward,
    head,
    init_params,
    loss_and_grad,
    param_count,
    trunk,
)
from .optim import AdamState, adam_step, clip_by_global_norm
from .training import EpochRecord, TrainConfig, TrainResult, feature_stats, normalize, train

__all__ = [
    "FORMAT_VERSION", "ModelCheckpoint", "load_checkpoint", "save_checkpoint",
    "OUTPUT_MODES", "WindowEncoding", "WindowSet", "encode_windows", "training_windows", "window_starts",
    "hidden_states", "mc_dropout", "mc_dropout_predict", "predict_trajectory", "predict_windows",
    "NetworkSpec", "ParamLayout", "backward", "dropout_mask", "forward", "head", "init_params",
    "loss_and_grad", "param_count", "trunk",
    "AdamState", "adam_step", "clip_by_global_norm",
    "EpochRecord", "TrainConfig", "TrainResult", "feature_stats", "normalize", "train",
]
