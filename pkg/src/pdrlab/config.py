"""Scenario documents: one JSON or TOML file driving every command line stage."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .kalman import KfConfig
from .neuralnet import NetworkSpec, TrainConfig, WindowEncoding
from .simkit import SensorNoiseSpec, activity_profile

SCHEMA_VERSION = 1

_PIPELINE_DEFAULTS = {
    "f_s": 100.0, "policy": "realtime", "n_w": 128, "overlap": 0.5, "horizon": 0.0,
    "beta": 0.1, "calib_block": 10.0, "dt": 0.01,
}
_CLASSIC_DEFAULTS = {"theta_source": "ori", "recal_interval": None}
_KF_DEFAULTS = {
    "q0_grid": [0.1, 1.0, 10.0, 100.0], "r_pos_grid": [0.01, 0.03, 0.1, 0.3], "r_vel_grid": [0.1, 1.0, 10.0],
    "heading_source": "ori", "q0": None, "r_pos": None, "r_vel": None,
}
_NETWORK_DEFAULTS = {
    "inputs": ["p_radio", "v", "theta_ori"], "output_mode": "absolute", "ff_in_dims": [32], "lstm_layers": 1,
    "lstm_cells": 32, "dropout_rate": 0.5, "train_stride": 32,
}
_EXPERIMENT_DEFAULTS = {"design": "activity", "seeds": 5, "scale": {}, "options": {}}
_SECTIONS = {
    "pipeline": _PIPELINE_DEFAULTS,
    "classic": _CLASSIC_DEFAULTS,
    "kf": _KF_DEFAULTS,
    "network": _NETWORK_DEFAULTS,
    "experiment": _EXPERIMENT_DEFAULTS,
}
_TOP_LEVEL = {"schema", "profiles", "noise", "train", "seed", "output_dir", "files", *_SECTIONS}
_FILE_KEYS = {"streams", "segments", "checkpoint", "estimates", "reference"}


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{section}.{name}" if section else name, "unknown key")


def _load_text(path: Path):
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            try:
                import tomli as tomllib
            except ModuleNotFoundError:
                raise ConfigError("config", "TOML configs need Python 3.11+ or the 'tomli' package") from None
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"invalid TOML: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated, defaults-filled scenario. ``doc`` is the canonical dictionary form."""

    doc: dict
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, raw, base_dir=".", check_files=True):
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a table/object")
        raw = copy.deepcopy(raw)
        _check_keys("", raw, _TOP_LEVEL)
        schema = raw.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ConfigError("schema", f"unsupported schema version {schema!r} (expected {SCHEMA_VERSION})")
        doc = {"schema": SCHEMA_VERSION}
        profiles = raw.get("profiles", [{"kind": "walking", "duration": 60.0}])
        if not isinstance(profiles, list) or not profiles:
            raise ConfigError("profiles", "must be a non-empty list")
        doc["profiles"] = []
        for i, p in enumerate(profiles):
            p = dict(p)
            kind = p.pop("kind", "walking")
            duration = p.pop("duration", 60.0)
            try:
                prof = activity_profile(kind, duration, **p)
            except ConfigError as exc:
                raise ConfigError(f"profiles[{i}].{exc.field}", str(exc).split(": ", 1)[-1]) from None
            except TypeError:
                raise ConfigError(f"profiles[{i}]", "unknown profile key") from None
            doc["profiles"].append(prof.to_dict())
        try:
            doc["noise"] = SensorNoiseSpec.from_dict(raw.get("noise", {})).to_dict()
        except ConfigError as exc:
            raise ConfigError(f"noise.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        for name, defaults in _SECTIONS.items():
            given = raw.get(name, {})
            _check_keys(name, given, defaults)
            doc[name] = {**copy.deepcopy(defaults), **given}
        try:
            doc["train"] = TrainConfig.from_dict({**TrainConfig(batch=128, max_epochs=20, patience=5).__dict__,
                                                  **raw.get("train", {})}).__dict__
        except ConfigError as exc:
            raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        doc["seed"] = raw.get("seed", 0)
        if not isinstance(doc["seed"], int) or doc["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        doc["output_dir"] = raw.get("output_dir", "out")
        files = raw.get("files", {})
        _check_keys("files", files, _FILE_KEYS)
        doc["files"] = files
        cfg = cls(doc, Path(base_dir))
        cfg._validate(check_files)
        return cfg

    @classmethod
    def load(cls, path, check_files=True):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(_load_text(path), path.parent, check_files)

    def _validate(self, check_files):
        d = self.doc
        pipe = d["pipeline"]
        if pipe["policy"] not in ("offline", "realtime"):
            raise ConfigError("pipeline.policy", "expected 'offline' or 'realtime'")
        if not 0 <= pipe["overlap"] < 1:
            raise ConfigError("pipeline.overlap", "must lie in [0, 1)")
        for name in ("f_s", "calib_block", "dt"):
            if not pipe[name] > 0:
                raise ConfigError(f"pipeline.{name}", "must be positive")
        if pipe["horizon"] < 0:
            raise ConfigError("pipeline.horizon", "must be non-negative")
        if d["classic"]["theta_source"] not in ("ori", "radio", "ref"):
            raise ConfigError("classic.theta_source", "expected ori, radio or ref")
        kf = d["kf"]
        for grid in ("q0_grid", "r_pos_grid", "r_vel_grid"):
            if not kf[grid] or any(not v > 0 for v in kf[grid]):
                raise ConfigError(f"kf.{grid}", "must be a non-empty list of positive values")
        try:
            KfConfig(heading_source=kf["heading_source"])
        except ConfigError as exc:
            raise ConfigError(f"kf.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        try:
            enc = self.encoding()
            self.network_spec(enc)
        except ConfigError as exc:
            raise ConfigError(f"network.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        exp = d["experiment"]
        from .evalkit.experiments import DESIGNS, LabScale

        if exp["design"] not in DESIGNS:
            raise ConfigError("experiment.design", f"expected one of {DESIGNS}")
        if not isinstance(exp["seeds"], int) or exp["seeds"] < 1:
            raise ConfigError("experiment.seeds", "must be a positive integer")
        try:
            LabScale.from_dict(exp["scale"])
        except (ConfigError, TypeError) as exc:
            raise ConfigError("experiment.scale", str(exc)) from None
        if check_files:
            for key, value in d["files"].items():
                for p in value if isinstance(value, list) else [value]:
                    if not self.resolve(p).exists():
                        raise FileNotFoundError(f"files.{key}: referenced file does not exist: {self.resolve(p)}")

    # -- derived objects ----------------------------------------------------------

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def file_list(self, key):
        value = self.doc["files"].get(key)
        if value is None:
            return None
        return [self.resolve(p) for p in (value if isinstance(value, list) else [value])]

    def profiles(self):
        from .simkit import ActivityProfile

        return [ActivityProfile.from_dict(p) for p in self.doc["profiles"]]

    def noise(self):
        return SensorNoiseSpec.from_dict(self.doc["noise"])

    def encoding(self, **overrides):
        net, pipe = self.doc["network"], self.doc["pipeline"]
        base = dict(channels=tuple(net["inputs"]), n_w=pipe["n_w"], horizon=pipe["horizon"], f_s=pipe["f_s"],
                    output_mode=net["output_mode"])
        base.update(overrides)
        return WindowEncoding(**base)

    def network_spec(self, encoding):
        net = self.doc["network"]
        return NetworkSpec(encoding.input_dim, tuple(net["ff_in_dims"]), net["lstm_layers"], net["lstm_cells"],
                           net["dropout_rate"], (2,), init_seed=self.doc["seed"], aux_dim=encoding.aux_dim)

    def train_config(self, seed=None):
        d = dict(self.doc["train"])
        if seed is not None:
            d["seed"] = seed
        return TrainConfig.from_dict(d)

    def kf_base(self):
        kf = self.doc["kf"]
        over = {k: kf[k] for k in ("q0", "r_pos", "r_vel") if kf[k] is not None}
        return KfConfig(heading_source=kf["heading_source"], **over)

    def with_overrides(self, **sections):
        """New config with the given top-level sections shallow-merged."""
        raw = copy.deepcopy(self.doc)
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return ScenarioConfig.from_dict(raw, self.base_dir, check_files=False)

    def canonical_json(self):
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
