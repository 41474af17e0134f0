"""Scripted study designs comparing classical dead reckoning, the Kalman filter and the network.

Subjects are simulator seeds. Training and test subjects are derived from
disjoint seed streams, so every evaluation is on unseen trajectories. A
:class:`Lab` caches simulated segments, tuned filters and trained networks so
that several designs run in one process share work.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .. import kalman
from ..classic import reconstruct_segment
from ..errors import ConfigError
from ..neuralnet import NetworkSpec, TrainConfig, WindowEncoding, predict_trajectory, train, training_windows
from ..pipeline import simulate_segment
from ..poses import PoseTrack
from ..simkit import KINDS, SensorNoiseSpec, activity_profile
from .metrics import position_errors, settling_time, summarize

DESIGNS = ("inputs", "forecast", "recal", "activity", "modes")
ESTIMATORS = ("classic", "kf", "pdrnn")
MAX_DEFAULT_HORIZON = 2.0


@dataclass(frozen=True)
class LabScale:
    """Desk-scale knobs shared by every design."""

    train_activities: tuple = ("walking", "jogging", "running")
    train_duration: float = 200.0
    train_subjects: int = 1
    test_activity: str = "random"
    test_duration: float = 120.0
    test_subjects: int = 1
    f_s: float = 100.0
    policy: str = "realtime"
    n_w: int = 128
    train_stride: int = 32
    eval_stride: int = 1
    channels: tuple = ("p_radio", "v", "theta_ori")
    ff_in: int = 32
    lstm_cells: int = 32
    dropout: float = 0.5
    batch: int = 128
    max_epochs: int = 20
    patience: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    l2_weight: float = 1e-6
    lr_halve_every: int = 10
    grad_clip: float = 1.0
    kf_q0_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    kf_r_pos_grid: tuple = (0.01, 0.03, 0.1, 0.3)
    kf_r_vel_grid: tuple = (0.1, 1.0, 10.0)
    kf_heading: str = "ori"
    classic_heading: str = "ori"
    settle_threshold: float = 0.3
    settle_hold: float = 0.2
    settle_window: float = 5.0
    noise: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_activities", "channels", "kf_q0_grid", "kf_r_pos_grid", "kf_r_vel_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "noise", dict(self.noise))
        for kind in self.train_activities + (self.test_activity,):
            if kind not in KINDS:
                raise ConfigError("activity", f"unknown activity {kind!r}")
        for name in ("train_duration", "test_duration", "f_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        for name in ("train_subjects", "test_subjects", "n_w", "train_stride", "eval_stride",
                     "lstm_cells", "batch", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        SensorNoiseSpec.from_dict(self.noise)

    def noise_spec(self, **overrides):
        return SensorNoiseSpec.from_dict({**self.noise, **overrides})

    def network(self, encoding: WindowEncoding):
        return NetworkSpec(encoding.input_dim, (self.ff_in,) if self.ff_in else (), 1, self.lstm_cells,
                           self.dropout, (2,), aux_dim=encoding.aux_dim)

    def train_config(self, seed):
        return TrainConfig(lr=self.lr, beta1=self.beta1, batch=self.batch, max_epochs=self.max_epochs,
                           patience=self.patience, l2_weight=self.l2_weight, grad_clip=self.grad_clip,
                           lr_halve_every=self.lr_halve_every, seed=seed)

    def encoding(self, **overrides):
        base = dict(channels=self.channels, n_w=self.n_w, f_s=self.f_s)
        base.update(overrides)
        return WindowEncoding(**base)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown experiment scale option")
        return cls(**d)


def subject_seed(seed, role, activity, index):
    """Independent simulator seed for one (experiment seed, role, activity, subject)."""
    roles = {"train": 0, "test": 1}
    ss = np.random.SeedSequence([int(seed), roles[role], KINDS.index(activity), int(index)])
    return int(ss.generate_state(1)[0])


class Lab:
    """Caches subjects, tuned filters and trained networks for one scale."""

    def __init__(self, scale: LabScale | None = None):
        self.scale = scale or LabScale()
        self._segments = {}
        self._kf = {}
        self._models = {}

    def segment(self, seed, role, activity, index=0, noise=None):
        noise = noise or {}
        key = (seed, role, activity, index, json.dumps(noise, sort_keys=True))
        if key not in self._segments:
            sc = self.scale
            duration = sc.train_duration if role == "train" else sc.test_duration
            self._segments[key] = simulate_segment(
                activity_profile(activity, duration), sc.noise_spec(**noise),
                subject_seed(seed, role, activity, index), f_s=sc.f_s, policy=sc.policy,
                segment_id=f"{role}-{activity}-{seed}-{index}")
        return self._segments[key]

    def train_segments(self, seed, activities=None, noise=None):
        acts = self.scale.train_activities if activities is None else activities
        return [self.segment(seed, "train", a, i, noise) for a in acts for i in range(self.scale.train_subjects)]

    def test_segments(self, seed, activity=None, noise=None):
        act = activity or self.scale.test_activity
        return [self.segment(seed, "test", act, i, noise) for i in range(self.scale.test_subjects)]

    def kf_config(self, seed, activities=None, noise=None):
        key = (seed, tuple(activities or ()), json.dumps(noise or {}, sort_keys=True))
        if key not in self._kf:
            sc = self.scale
            base = kalman.KfConfig(heading_source=sc.kf_heading)
            self._kf[key] = kalman.kf_tune(self.train_segments(seed, activities, noise), sc.kf_q0_grid,
                                           sc.kf_r_pos_grid, sc.kf_r_vel_grid, base=base,
                                           start_tick=sc.n_w - 1)
        return self._kf[key]

    def model(self, seed, encoding: WindowEncoding, activities=None, noise=None):
        key = (seed, json.dumps(encoding.to_dict(), sort_keys=True), tuple(activities or ()),
               json.dumps(noise or {}, sort_keys=True))
        if key not in self._models:
            sc = self.scale
            ws = training_windows(self.train_segments(seed, activities, noise), encoding,
                                  stride=sc.train_stride, seed=seed)
            res = train(ws, sc.network(encoding), sc.train_config(seed), encoding=encoding)
            self._models[key] = res.checkpoint
        return self._models[key]


class Cell(NamedTuple):
    levels: dict
    seed: int
    estimator: str
    report: dict
    settling: list

    def row(self):
        settled = [s for s in self.settling if not math.isnan(s)]
        return {
            **{k: _level_str(v) for k, v in self.levels.items()},
            "estimator": self.estimator,
            "seed": self.seed,
            **self.report,
            "settle_median": _json_float(settle_median(self.settling)),
            "settle_events": len(self.settling),
            "settle_unset": len(self.settling) - len(settled),
        }


def settle_median(times):
    """Median settling time with unsettled events counted as infinitely slow; None without events."""
    if not len(times):
        return None
    return float(np.median([math.inf if math.isnan(x) else x for x in times]))


def _level_str(v):
    if isinstance(v, (list, tuple)):
        return "+".join(str(x) for x in v)
    return v


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return None
    return ("inf" if x > 0 else "-inf") if math.isinf(x) else x


@dataclass
class ExperimentResult:
    design: str
    factors: dict
    seeds: list
    cells: list = field(default_factory=list)
    trends: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)
    scale: dict = field(default_factory=dict)

    def groups(self):
        out = {}
        for c in self.cells:
            key = (json.dumps({k: _level_str(v) for k, v in c.levels.items()}, sort_keys=True), c.estimator)
            out.setdefault(key, []).append(c)
        return out

    def median(self, metric, estimator, **levels):
        vals = [c.report[metric] for c in self.select(estimator, **levels)]
        if not vals:
            raise KeyError(f"no cells for {estimator} {levels}")
        return float(np.median(vals))

    def select(self, estimator, **levels):
        return [c for c in self.cells if c.estimator == estimator
                and all(_level_str(c.levels.get(k)) == _level_str(v) for k, v in levels.items())]

    def summary(self):
        groups = []
        for (lv, est), cells in sorted(self.groups().items()):
            settle = [s for c in cells for s in c.settling]
            n_events = len(settle)
            g = {
                "levels": json.loads(lv),
                "estimator": est,
                "seeds": [c.seed for c in cells],
                "settle_median": _json_float(settle_median(settle)),
                "settle_events": n_events,
                "settle_unset": sum(math.isnan(x) for x in settle),
            }
            for m in ("mae", "mse", "rmse", "cep95"):
                g[f"median_{m}"] = float(np.median([c.report[m] for c in cells]))
            groups.append(g)
        return {
            "design": self.design,
            "factors": {k: [_json_float(x) if isinstance(x, float) else _level_str(x) for x in v]
                        for k, v in self.factors.items()},
            "seeds": list(self.seeds),
            "groups": groups,
            "trends": self.trends,
            "excluded": self.excluded,
            "scale": self.scale,
        }

    def summary_json(self):
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"

    def to_csv(self):
        rows = [c.row() for c in self.cells]
        cols = []
        for r in rows:
            cols += [k for k in r if k not in cols]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


# -- evaluation helpers -----------------------------------------------------------


def _eval_start(scale: LabScale, horizon=0.0, n_w=None):
    return ((n_w or scale.n_w) - 1) / scale.f_s + horizon


def evaluate_track(track: PoseTrack, segment, scale: LabScale, horizon=0.0, n_w=None, settle=True):
    """ErrorReport dict and settling times of ``track`` on ``segment``'s reference."""
    t_min = segment.t0 + _eval_start(scale, horizon, n_w) - 1e-9
    keep = track.t >= t_min
    t, err = position_errors(PoseTrack(track.t[keep], track.mean[keep], track.var[keep], track.horizon),
                             segment.ref, f_s=segment.f_s, return_times=True)
    rep = summarize(err).as_dict()
    settling = []
    if settle:
        events = [e.t for e in segment.ref.events
                  if abs(e.angle) >= math.pi / 2 - 1e-9 and t[0] <= e.t <= t[-1] - scale.settle_window]
        settling = settling_time(t, err, events, scale.settle_threshold, scale.settle_hold,
                                 scale.settle_window)
    return rep, settling


def _merge(parts):
    """Pool several (report, settling) pairs of one cell into one report."""
    if len(parts) == 1:
        return parts[0]
    n = sum(p[0]["n"] for p in parts)
    rep = {
        "n": n,
        "mae": sum(p[0]["mae"] * p[0]["n"] for p in parts) / n,
        "mse": sum(p[0]["mse"] * p[0]["n"] for p in parts) / n,
        "cep95": float(np.median([p[0]["cep95"] for p in parts])),
    }
    rep["rmse"] = max(math.sqrt(rep["mse"]), rep["mae"])
    return rep, [s for p in parts for s in p[1]]


def classic_track(segment, scale: LabScale, recal_interval=math.inf):
    rec = reconstruct_segment(segment, theta_source=scale.classic_heading, recal_interval=recal_interval)
    return PoseTrack(rec.t, rec.xy, None, 0.0)


def thin_radio(segment, interval):
    """Keep only the radio fixes used by a recalibration schedule of ``interval`` seconds."""
    from ..streams import MISSING

    if math.isinf(interval):
        return segment
    codes = segment.validity["p_radio"].copy()
    k_step = int(round(interval * segment.f_s))
    keep = np.zeros(len(codes), bool)
    keep[::k_step] = True
    first = np.flatnonzero(codes != MISSING)
    if len(first):
        keep[first[0]] = True
    codes[~keep] = MISSING
    p = segment.channels["p_radio"].copy()
    p[~keep] = np.nan
    return segment.with_channel("p_radio", p, codes)


def _estimate(lab: Lab, estimator, seed, segment, horizon=0.0, encoding=None, activities=None, noise=None,
              recal_interval=math.inf):
    sc = lab.scale
    if estimator == "classic":
        if horizon:
            raise ConfigError("horizon", "classical dead reckoning does not forecast")
        return classic_track(segment, sc, recal_interval)
    if estimator == "kf":
        seg = thin_radio(segment, recal_interval)
        return kalman.kf_run(seg, lab.kf_config(seed, activities, noise), horizon=horizon)
    if estimator == "pdrnn":
        enc = encoding or sc.encoding(horizon=horizon)
        ckpt = lab.model(seed, enc, activities, noise)
        return predict_trajectory(thin_radio(segment, recal_interval), ckpt, stride=sc.eval_stride)
    raise ConfigError("estimator", f"expected one of {ESTIMATORS}")


def _cell(lab, estimator, seed, levels, horizon=0.0, encoding=None, activity=None, activities=None,
          noise=None, recal_interval=math.inf, settle=True):
    sc = lab.scale
    n_w = encoding.n_w if encoding is not None else sc.n_w
    parts = []
    for seg in lab.test_segments(seed, activity, noise):
        track = _estimate(lab, estimator, seed, seg, horizon, encoding, activities, noise, recal_interval)
        parts.append(evaluate_track(track, seg, sc, horizon, max(n_w, sc.n_w), settle))
    rep, settling = _merge(parts)
    return Cell(levels, seed, estimator, rep, settling)


def _run_seeds(fn, seeds, scale, workers, *args):
    """Run ``fn(lab, seed, *args)`` per seed, in-process or on a worker pool."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_seed_job, fn, scale, s, args) for s in seeds]
            chunks = [f.result() for f in futures]
    else:
        lab = scale if isinstance(scale, Lab) else Lab(scale)
        chunks = [fn(lab, s, *args) for s in seeds]
    return [c for chunk in chunks for c in chunk]


def _seed_job(fn, scale, seed, args):
    lab = Lab(scale.scale if isinstance(scale, Lab) else scale)
    return fn(lab, seed, *args)


def _lab_and_scale(lab, scale):
    if lab is not None:
        return lab, lab.scale
    scale = scale or LabScale()
    return Lab(scale), scale


# -- designs ------------------------------------------------------------------------


def _inputs_job(lab, seed, input_sets):
    return [_cell(lab, "pdrnn", seed, {"inputs": tuple(s)}, encoding=lab.scale.encoding(channels=tuple(s)),
                  settle=False) for s in input_sets]


def run_input_variation(input_sets, seeds, lab=None, scale=None, workers=1):
    """One network per input set and seed, evaluated on held-out subjects."""
    lab, scale = _lab_and_scale(lab, scale)
    input_sets = [tuple(s) for s in input_sets]
    cells = _run_seeds(_inputs_job, seeds, lab if workers <= 1 else scale, workers, input_sets)
    res = ExperimentResult("inputs", {"inputs": input_sets}, list(seeds), cells, scale=scale.to_dict())
    medians = {"+".join(s): res.median("mae", "pdrnn", inputs=s) for s in input_sets}
    res.trends = {"median_mae": medians, "best_inputs": min(medians, key=medians.get)}
    return res


def _forecast_job(lab, seed, horizons, seq_lengths, estimators):
    cells = []
    for L in seq_lengths:
        n_w = int(round(L * lab.scale.f_s))
        for h in horizons:
            enc = lab.scale.encoding(n_w=n_w, horizon=h)
            for est in estimators:
                if est == "kf" and L != seq_lengths[0]:
                    continue
                cells.append(_cell(lab, est, seed, {"seq_len": L, "horizon": h}, horizon=h, encoding=enc,
                                   settle=False))
    return cells


def run_forecast_sweep(seeds, horizons=(0.0, 1.0, 2.0), seq_lengths=(0.64, 1.28, 2.56), lab=None, scale=None,
                       estimators=("pdrnn",), include_excluded=False, workers=1):
    """Full factorial over horizon and sequence length; trends are reported, not enforced."""
    lab, scale = _lab_and_scale(lab, scale)
    horizons = [float(h) for h in horizons]
    excluded = [h for h in horizons if h > MAX_DEFAULT_HORIZON and not include_excluded]
    horizons = [h for h in horizons if h not in excluded]
    seq_lengths = [float(s) for s in seq_lengths]
    cells = _run_seeds(_forecast_job, seeds, lab if workers <= 1 else scale, workers, horizons, seq_lengths,
                       tuple(estimators))
    res = ExperimentResult("forecast", {"horizon": horizons, "seq_len": seq_lengths}, list(seeds), cells,
                           excluded=[{"horizon": h, "reason": "beyond default forecast range"} for h in excluded],
                           scale=scale.to_dict())
    trends = {"nondecreasing_in_horizon": {}, "median_mae": {}}
    if "pdrnn" in estimators:
        for L in seq_lengths:
            m = [res.median("mae", "pdrnn", seq_len=L, horizon=h) for h in horizons]
            trends["median_mae"][repr(L)] = m
            trends["nondecreasing_in_horizon"][repr(L)] = bool(all(b >= a for a, b in zip(m, m[1:])))
        if 1.0 in horizons:
            at_h1 = {repr(L): res.median("mae", "pdrnn", seq_len=L, horizon=1.0) for L in seq_lengths}
            trends["best_seq_len_at_h1"] = min(at_h1, key=at_h1.get)
    res.trends = trends
    return res


def _recal_job(lab, seed, intervals, estimators, noise):
    cells = []
    for iv in intervals:
        for est in estimators:
            cells.append(_cell(lab, est, seed, {"interval": iv}, noise=noise, recal_interval=iv, settle=False))
    return cells


def run_recal_sweep(seeds, intervals=(1.0, 30.0, 100.0, math.inf), estimators=("classic", "kf", "pdrnn"),
                    speed_scale=1.05, lab=None, scale=None, workers=1):
    """Recalibration interval x estimator on velocity-biased data.

    For the filter and the network, recalibration means only the scheduled
    radio fixes reach the estimator.
    """
    lab, scale = _lab_and_scale(lab, scale)
    intervals = [float(i) for i in intervals]
    noise = {"speed_scale": float(speed_scale)}
    cells = _run_seeds(_recal_job, seeds, lab if workers <= 1 else scale, workers, intervals, tuple(estimators),
                       noise)
    res = ExperimentResult("recal", {"interval": intervals, "estimator": list(estimators)}, list(seeds), cells,
                           scale={**scale.to_dict(), "speed_scale": float(speed_scale)})
    trends = {}
    if "classic" in estimators:
        order = sorted(intervals)
        m = [res.median("mae", "classic", interval=i) for i in order]
        trends["classic_median_mae"] = {repr(i): v for i, v in zip(order, m)}
        trends["classic_mae_nonincreasing_as_interval_shrinks"] = bool(all(a <= b for a, b in zip(m, m[1:])))
    res.trends = trends
    return res


def _activity_job(lab, seed, activities, estimators):
    cells = []
    for act in activities:
        for est in estimators:
            cells.append(_cell(lab, est, seed, {"activity": act}, activity=act))
    return cells


def run_activity_comparison(seeds, activities=("random",), estimators=("classic", "kf", "pdrnn"),
                            lab=None, scale=None, workers=1):
    """Train on the scale's training activities and test per activity on held-out subjects."""
    lab, scale = _lab_and_scale(lab, scale)
    cells = _run_seeds(_activity_job, seeds, lab if workers <= 1 else scale, workers, tuple(activities),
                       tuple(estimators))
    res = ExperimentResult("activity", {"activity": list(activities), "estimator": list(estimators)},
                           list(seeds), cells, scale=scale.to_dict())
    trends = {"median_cep95": {}, "median_settle": {}}
    for act in activities:
        trends["median_cep95"][act] = {e: res.median("cep95", e, activity=act) for e in estimators}
        for e in estimators:
            s = [x for c in res.select(e, activity=act) for x in c.settling]
            trends["median_settle"].setdefault(act, {})[e] = _json_float(settle_median(s))
    res.trends = trends
    return res


def _modes_job(lab, seed, modes):
    return [_cell(lab, "pdrnn", seed, {"output_mode": m}, encoding=lab.scale.encoding(output_mode=m),
                  settle=False) for m in modes]


def run_output_modes(seeds, modes=("absolute", "delta"), lab=None, scale=None, workers=1):
    """Absolute-position versus delta-output networks on the same held-out subjects."""
    lab, scale = _lab_and_scale(lab, scale)
    cells = _run_seeds(_modes_job, seeds, lab if workers <= 1 else scale, workers, tuple(modes))
    res = ExperimentResult("modes", {"output_mode": list(modes)}, list(seeds), cells, scale=scale.to_dict())
    med = {m: res.median("mae", "pdrnn", output_mode=m) for m in modes}
    res.trends = {"median_mae": med}
    if "absolute" in med and "delta" in med:
        res.trends["delta_over_absolute"] = med["delta"] / med["absolute"]
    return res


def run_design(design, seeds, scale=None, lab=None, workers=1, **options):
    """Dispatch by design name (used by the command line)."""
    runners = {
        "inputs": lambda: run_input_variation(options.get("input_sets", [scale_or(scale, lab).channels]),
                                              seeds, lab, scale, workers),
        "forecast": lambda: run_forecast_sweep(seeds, lab=lab, scale=scale, workers=workers, **options),
        "recal": lambda: run_recal_sweep(seeds, lab=lab, scale=scale, workers=workers, **options),
        "activity": lambda: run_activity_comparison(seeds, lab=lab, scale=scale, workers=workers, **options),
        "modes": lambda: run_output_modes(seeds, lab=lab, scale=scale, workers=workers, **options),
    }
    if design not in runners:
        raise ConfigError("design", f"expected one of {DESIGNS}")
    return runners[design]()


def scale_or(scale, lab):
    if lab is not None:
        return lab.scale
    return scale or LabScale()


def with_scale(scale: LabScale, **overrides):
    return replace(scale, **overrides)
