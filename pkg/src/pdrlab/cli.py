"""``pdr`` command line: file-based stages from simulation to experiment reports.

Every stage writes its artifacts plus a ``manifest.json`` into its own
directory under ``--out``. The manifest records the resolved config, its
hash, the seed, input and output file hashes and library versions. Running
``pdr --verify --config <manifest.json>`` replays the stage into a scratch
directory and compares every output byte for byte.

Exit codes: 0 success, 1 configuration error, 2 I/O error (missing or
malformed files), 3 numerical failure, 4 verification mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import platform
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classic import reconstruct_segment
from .config import ScenarioConfig
from .errors import (
    AlignmentError,
    ConfigError,
    EmptyInputError,
    InsufficientDataError,
    MalformedStreamError,
    MissingModalityError,
    NumericError,
    SpecError,
)
from .evalkit import position_errors, run_design, summarize
from .evalkit.experiments import LabScale
from .kalman import kf_run, kf_tune
from .neuralnet import load_checkpoint, predict_trajectory, save_checkpoint, train, training_windows
from .pipeline import build_segment
from .simkit import simulate_streams
from .streams import Segment, make_windows, read_jsonl, write_jsonl
from .trajectory import reference_from_csv, reference_to_csv

log = logging.getLogger("pdrlab")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 1, 2, 3, 4
_CONFIG_ERRORS = (ConfigError, SpecError, EmptyInputError, InsufficientDataError, MissingModalityError,
                  AlignmentError)
_IO_ERRORS = (OSError, MalformedStreamError)
_NUMERIC_ERRORS = (NumericError, FloatingPointError)


class MissingArtifact(FileNotFoundError):
    pass


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {what}: expected {path}")
    return path


def _finite_or_raise(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


def _subject_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _names(cfg):
    return [f"{i:02d}-{p['kind']}" for i, p in enumerate(cfg.doc["profiles"])]


def _load_segments(seg_dir):
    seg_dir = _require(seg_dir, "segment directory (run `pdr pipeline` first)")
    paths = sorted(seg_dir.glob("*.csv"))
    paths = [p for p in paths if p.name != "windows.csv"]
    if not paths:
        raise MissingArtifact(f"missing segments: expected *.csv in {seg_dir}")
    return [(p.stem, Segment.from_csv(p)) for p in paths]


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- stages ---------------------------------------------------------------------------
# Each returns the list of files it wrote (relative to its stage directory).


def cmd_simulate(cfg, args, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    noise, dt = cfg.noise(), cfg.doc["pipeline"]["dt"]
    written = []
    for i, (name, prof) in enumerate(zip(_names(cfg), cfg.profiles())):
        ref, streams = simulate_streams(prof, noise, _subject_seed(args.seed, i), dt)
        write_jsonl(streams, out / f"{name}.jsonl")
        reference_to_csv(ref, out / f"{name}.ref.csv")
        written += [f"{name}.jsonl", f"{name}.ref.csv"]
        counts = ", ".join(f"{s.modality}={len(s)}" for s in streams)
        print(f"{name}: {counts}")
    return written


def cmd_pipeline(cfg, args, out: Path):
    src = _require(args.streams, "stream directory (run `pdr simulate` first)")
    pipe = cfg.doc["pipeline"]
    f_s = args.fs or pipe["f_s"]
    n_w = args.window or pipe["n_w"]
    overlap = pipe["overlap"] if args.overlap is None else args.overlap
    horizon = pipe["horizon"] if args.horizon is None else args.horizon
    files = sorted(src.glob("*.jsonl"))
    if not files:
        raise MissingArtifact(f"missing streams: expected *.jsonl in {src}")
    out.mkdir(parents=True, exist_ok=True)
    written, rows = [], []
    for f in files:
        name = f.name[:-len(".jsonl")]
        ref_path = src / f"{name}.ref.csv"
        ref = reference_from_csv(ref_path) if ref_path.exists() else None
        seg = build_segment(read_jsonl(f), f_s, pipe["policy"], ref=ref, beta=pipe["beta"],
                            calib_block=pipe["calib_block"], segment_id=name)
        seg.to_csv(out / f"{name}.csv")
        written.append(f"{name}.csv")
        for w in make_windows(seg, n_w, overlap, horizon):
            rows.append((name, w.start_tick, w.length, w.target_tick))
        print(f"{name}: {seg.n_ticks} ticks")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["segment", "start", "n_w", "target_tick"])
    wr.writerows(rows)
    (out / "windows.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"{len(rows)} windows")
    return written + ["windows.csv"]


def cmd_reconstruct(cfg, args, out: Path):
    cl = cfg.doc["classic"]
    source = args.theta_source or cl["theta_source"]
    interval = args.recal_interval if args.recal_interval is not None else cl["recal_interval"]
    interval = math.inf if interval is None else float(interval)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, seg in _load_segments(args.segments):
        rec = reconstruct_segment(seg, theta_source=source, recal_interval=interval)
        _finite_or_raise(rec.xy, f"reconstruction of {name}")
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "x", "y", "theta"])
        for k in range(len(rec.t)):
            wr.writerow([repr(float(v)) for v in (rec.t[k], rec.xy[k, 0], rec.xy[k, 1], rec.theta[k])])
        (out / f"{name}.csv").write_text(buf.getvalue(), encoding="utf-8")
        written.append(f"{name}.csv")
    return written


def cmd_kf(cfg, args, out: Path):
    segs = _load_segments(args.segments)
    kf = cfg.doc["kf"]
    base = cfg.kf_base()
    over = {k: getattr(args, k) for k in ("q0", "r_pos", "r_vel") if getattr(args, k) is not None}
    if args.tune:
        base = kf_tune([s for _, s in segs], kf["q0_grid"], kf["r_pos_grid"], kf["r_vel_grid"], base=base,
                       start_tick=cfg.doc["pipeline"]["n_w"] - 1)
    if over:
        from dataclasses import replace

        base = replace(base, **over)
    horizon = cfg.doc["pipeline"]["horizon"] if args.horizon is None else args.horizon
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, seg in segs:
        track = kf_run(seg, base, horizon=horizon)
        _finite_or_raise(track.mean, f"filter estimates for {name}")
        track.to_csv(out / f"{name}.csv")
        written.append(f"{name}.csv")
    _write_json({"config_hash": cfg.digest(), "kf": {"q0": base.q0, "r_pos": base.r_pos, "r_vel": base.r_vel,
                 "heading_source": base.heading_source}, "horizon": horizon}, out / "kf_config.json")
    print(f"q0={base.q0} r_pos={base.r_pos} r_vel={base.r_vel}")
    return written + ["kf_config.json"]


_CHANNEL_ALIASES = {"radio_pos": "p_radio", "radio_theta": "theta_radio", "ori_theta": "theta_ori"}


def cmd_train(cfg, args, out: Path):
    segs = _load_segments(args.segments)
    over = {}
    if args.inputs:
        over["channels"] = tuple(_CHANNEL_ALIASES.get(c.strip(), c.strip()) for c in args.inputs.split(","))
    if args.horizon is not None:
        over["horizon"] = args.horizon
    if args.window:
        over["n_w"] = args.window
    if args.output_mode:
        over["output_mode"] = args.output_mode
    enc = cfg.encoding(**over)
    tc = cfg.train_config(seed=args.seed)
    if args.epochs:
        tc = replace(tc, max_epochs=args.epochs)
    if args.beta1 is not None:
        tc = replace(tc, beta1=args.beta1)
    ws = training_windows([s for _, s in segs], enc, stride=cfg.doc["network"]["train_stride"], seed=args.seed)
    res = train(ws, cfg.network_spec(enc), tc, encoding=enc, metadata={"config_hash": cfg.digest()})
    _finite_or_raise(res.checkpoint.theta, "trained weights")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "model.ckpt")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "lr", "train_loss", "val_loss", "best_val"])
    for r in res.history:
        wr.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.best_val)])
    (out / "history.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"{len(ws)} windows, {len(res.history)} epochs, best val loss {min(r.val_loss for r in res.history):.6g}")
    return ["model.ckpt", "history.csv"]


def cmd_predict(cfg, args, out: Path):
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint (run `pdr train` first)"))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, seg in _load_segments(args.segments):
        track = predict_trajectory(seg, ckpt, stride=args.stride, mc_passes=args.mc_passes, seed=args.seed)
        _finite_or_raise(track.mean, f"network estimates for {name}")
        track.to_csv(out / f"{name}.csv")
        written.append(f"{name}.csv")
    return written


def _read_estimates(path):
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or "x" not in rows[0]:
        raise MalformedStreamError(f"{path}: expected columns t, x, y")
    t = np.array([float(r["t"]) for r in rows])
    xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    return t, xy


def cmd_evaluate(cfg, args, out: Path):
    est_dir = _require(args.estimates, "estimate directory")
    segs = dict(_load_segments(args.segments))
    reports, all_err = {}, []
    for name, seg in sorted(segs.items()):
        path = est_dir / f"{name}.csv"
        _require(path, f"estimates for segment {name}")
        if seg.ref is None:
            raise MissingArtifact(f"segment {name} carries no reference trajectory")
        t_min = seg.t0 + args.skip
        t, xy = _read_estimates(path)
        keep = t >= t_min - 1e-9
        err = position_errors((t[keep], xy[keep]), seg.ref, f_s=seg.f_s)
        _finite_or_raise(err, f"errors for {name}")
        reports[name] = summarize(err).as_dict()
        all_err.append(err)
    pooled = summarize(np.concatenate(all_err)).as_dict()
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"config_hash": cfg.digest(), "segments": reports, "pooled": pooled}, out / "report.json")
    print(json.dumps(pooled, sort_keys=True))
    return ["report.json"]


def _decode_options(obj):
    if isinstance(obj, dict):
        return {k: _decode_options(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_options(v) for v in obj]
    if isinstance(obj, str) and obj.lower() in ("inf", "infinity"):
        return math.inf
    return obj


def cmd_exp(cfg, args, out: Path):
    exp = cfg.doc["experiment"]
    design = args.design or exp["design"]
    n = args.seeds or exp["seeds"]
    seeds = [args.seed + i for i in range(n)]
    scale = LabScale.from_dict(exp["scale"])
    options = _decode_options(exp["options"])
    res = run_design(design, seeds, scale=scale, workers=args.workers, **options)
    out.mkdir(parents=True, exist_ok=True)
    summary = {**res.summary(), "config_hash": cfg.digest()}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "cells.csv").write_text(res.to_csv(), encoding="utf-8")
    print(json.dumps(res.trends, sort_keys=True))
    return ["summary.json", "cells.csv"]


STAGES = {
    "simulate": (cmd_simulate, "streams"),
    "pipeline": (cmd_pipeline, "segments"),
    "reconstruct": (cmd_reconstruct, "reconstruct"),
    "kf": (cmd_kf, "kf"),
    "train": (cmd_train, "model"),
    "predict": (cmd_predict, "predict"),
    "evaluate": (cmd_evaluate, "evaluate"),
    "exp": (cmd_exp, "exp"),
}
_PATH_ARGS = ("streams", "segments", "checkpoint", "estimates")


def _stage_dir(args):
    sub = STAGES[args.command][1]
    if args.command == "exp":
        return Path(args.out) / sub / (args.design or args.cfg.doc["experiment"]["design"])
    return Path(args.out) / sub


def _defaults_for_paths(args, cfg):
    out = Path(args.out)
    files = cfg.doc["files"]
    defaults = {
        "streams": cfg.file_list("streams")[0] if "streams" in files else out / "streams",
        "segments": cfg.file_list("segments")[0] if "segments" in files else out / "segments",
        "checkpoint": cfg.file_list("checkpoint")[0] if "checkpoint" in files else out / "model" / "model.ckpt",
        "estimates": cfg.file_list("estimates")[0] if "estimates" in files else out / "predict",
    }
    for key in _PATH_ARGS:
        if hasattr(args, key):
            value = getattr(args, key)
            setattr(args, key, Path(value if value is not None else defaults[key]).resolve())


def _stage_args(args):
    skip = {"cfg", "config", "out", "verify", "func", "workers"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _manifest(cfg, args, stage_dir, outputs):
    inputs = {}
    for key in _PATH_ARGS:
        p = getattr(args, key, None)
        if p is None or not Path(p).exists():
            continue
        p = Path(p)
        for f in sorted(p.rglob("*") if p.is_dir() else [p]):
            if f.is_file() and f.name != "manifest.json":
                inputs[str(f)] = sha256_file(f)
    return {
        "kind": "pdrlab-manifest",
        "command": args.command,
        "args": _stage_args(args),
        "config": cfg.doc,
        "config_base_dir": str(cfg.base_dir.resolve()),
        "config_hash": cfg.digest(),
        "seed": args.seed,
        "inputs": inputs,
        "outputs": {name: sha256_file(stage_dir / name) for name in outputs},
        "versions": {"pdrlab": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }


def run_stage(cfg, args):
    _defaults_for_paths(args, cfg)
    stage_dir = _stage_dir(args)
    func = STAGES[args.command][0]
    outputs = func(cfg, args, stage_dir)
    manifest = _manifest(cfg, args, stage_dir, outputs)
    _write_json(manifest, stage_dir / "manifest.json")
    print(f"wrote {len(outputs)} artifacts to {stage_dir} (config {manifest['config_hash'][:12]})")
    return manifest


def verify_manifest(path, workers=1):
    """Replay a stage manifest into a scratch directory; return the list of mismatching outputs."""
    manifest = json.loads(_require(path, "manifest").read_text(encoding="utf-8"))
    if manifest.get("kind") != "pdrlab-manifest":
        raise ConfigError("config", f"{path} is not a pdrlab manifest")
    cfg = ScenarioConfig.from_dict(manifest["config"], manifest["config_base_dir"], check_files=False)
    if cfg.digest() != manifest["config_hash"]:
        return ["config_hash"]
    for f, digest in manifest["inputs"].items():
        if sha256_file(_require(f, "recorded input")) != digest:
            raise MalformedStreamError(f"recorded input changed since the manifest was written: {f}")
    with tempfile.TemporaryDirectory() as tmp:
        ns = argparse.Namespace(**manifest["args"])
        ns.out, ns.workers, ns.verify = tmp, workers, False
        for key in _PATH_ARGS:
            if getattr(ns, key, None) is not None:
                setattr(ns, key, Path(getattr(ns, key)))
        _defaults_for_paths(ns, cfg)
        stage_dir = _stage_dir(argparse.Namespace(**vars(ns), cfg=cfg))
        STAGES[ns.command][0](cfg, ns, stage_dir)
        bad = []
        for name, digest in manifest["outputs"].items():
            produced = stage_dir / name
            if not produced.exists() or sha256_file(produced) != digest:
                bad.append(name)
    return bad


def build_parser():
    p = argparse.ArgumentParser(prog="pdr", description="Pedestrian positioning lab: simulate, fuse, train, evaluate.")
    p.add_argument("--config", help="scenario JSON/TOML, or a manifest.json with --verify")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: from config)")
    p.add_argument("--out", default=None, help="output root (default: config output_dir)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for experiment seeds")
    p.add_argument("--verify", action="store_true", help="replay the manifest given by --config and compare outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    sub.add_parser("simulate", help="simulate sensor streams and reference trajectories")

    s = sub.add_parser("pipeline", help="synchronise streams onto a grid and index windows")
    s.add_argument("--streams")
    s.add_argument("--fs", type=float)
    s.add_argument("--window", type=int)
    s.add_argument("--overlap", type=float)
    s.add_argument("--horizon", type=float)

    s = sub.add_parser("reconstruct", help="classical dead reckoning")
    s.add_argument("--segments")
    s.add_argument("--theta-source", choices=("ori", "radio", "ref"))
    s.add_argument("--recal-interval", type=float, metavar="SECONDS")

    s = sub.add_parser("kf", help="Kalman filter estimates")
    s.add_argument("action", nargs="?", default="run", choices=("run",))
    s.add_argument("--segments")
    s.add_argument("--q0", type=float)
    s.add_argument("--r-pos", type=float)
    s.add_argument("--r-vel", type=float)
    s.add_argument("--horizon", type=float)
    s.add_argument("--tune", action="store_true", help="grid-search noise levels on the segments first")

    s = sub.add_parser("train", help="train the recurrent network")
    s.add_argument("--segments")
    s.add_argument("--inputs", help="comma-separated channels, e.g. p_radio,v")
    s.add_argument("--horizon", type=float)
    s.add_argument("--window", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--output-mode", choices=("absolute", "delta"))
    s.add_argument("--beta1", type=float, help="Adam first-moment decay (default 0.9; 0.01 is the other documented value)")

    s = sub.add_parser("predict", help="run a trained network over segments")
    s.add_argument("--segments")
    s.add_argument("--checkpoint")
    s.add_argument("--mc-passes", type=int, default=0)
    s.add_argument("--stride", type=int, default=1)

    s = sub.add_parser("evaluate", help="error report of estimate CSVs against segment references")
    s.add_argument("--segments")
    s.add_argument("--estimates")
    s.add_argument("--skip", type=float, default=0.0, help="ignore the first SKIP seconds of each segment")

    s = sub.add_parser("exp", help="run a comparison design over several seeds")
    s.add_argument("action", nargs="?", default="run", choices=("run",))
    s.add_argument("--design", choices=("inputs", "forecast", "recal", "activity", "modes"))
    s.add_argument("--seeds", type=int, help="number of seeds")
    return p


def _dispatch(args):
    if args.verify:
        if not args.config:
            raise ConfigError("--verify", "needs --config pointing at a manifest.json")
        bad = verify_manifest(args.config, args.workers)
        if bad:
            print("MISMATCH: " + ", ".join(bad), file=sys.stderr)
            return EXIT_MISMATCH
        print(f"verified: outputs of {args.config} reproduced byte for byte")
        return 0
    if not args.command:
        raise ConfigError("command", "choose a subcommand (see --help)")
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig.from_dict({})
    args.cfg = cfg
    if args.seed is None:
        args.seed = cfg.doc["seed"]
    if args.out is None:
        args.out = str(cfg.resolve(cfg.doc["output_dir"])) if args.config else cfg.doc["output_dir"]
    run_stage(cfg, args)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            return _dispatch(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
