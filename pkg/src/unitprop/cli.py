"""Command-line entry point: ``unitprop <command> [options]``.

Commands: synth, train, propose, baseline, eval, correlate, bench. Each
takes ``--config FILE`` (JSON, see :mod:`unitprop.config`), ``--seed`` and
``--threads``; every config key also has a flag. Outputs get a
``<out>.config.json`` sidecar with the effective configuration.

Exit codes: 0 success, 2 bad usage, 3 bad config, 4 malformed input file,
5 missing input file, 6 training failure, 7 evaluation failure. Failures
print one JSON line ``{"error": ..., "exit_code": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from unitprop.config import SECTION_DEFAULTS, ConfigError, RunConfig, provenance
from unitprop.core import Detection, derive_seed
from unitprop.featurestore import (
    FeatureBank,
    FeatureFormatError,
    MissingInputError,
    find_dataset_files,
    load_annotations,
    load_store,
)
from unitprop.metrics import (
    EvaluationError,
    Frequency,
    ProposalEvaluator,
    TopN,
    Ratio,
    detection_map,
    evaluator_curve,
    format_curve_csv,
    pearson,
    recall_x_tiou,
)
from unitprop.model import CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint, train
from unitprop.proposer import (
    ProposalFormatError,
    propose_video,
    random_baseline,
    read_proposals,
    score_clips,
    sliding_window_baseline,
    sort_proposals,
    write_proposals,
)
from unitprop.sampling import PyramidConfig, TrainingConfigError, pyramid_arrays
from unitprop.synth import generate

log = logging.getLogger("unitprop")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_MISSING = 5
EXIT_TRAINING = 6
EXIT_EVAL = 7

FPS_DEFINITION = "frames/s = (units processed x unit_frames) / elapsed seconds"

DESCRIPTIONS = {
    "pyramid.scales": "clip lengths in units, one clip per anchor unit and scale",
    "pyramid.n_ctx": "context units pooled on each side of a clip",
    "train.lr": "Adam learning rate",
    "train.batch_size": "clips per minibatch",
    "train.bg_ratio": "negatives per positive in a minibatch",
    "train.lam": "weight of the offset regression loss",
    "train.hidden": "hidden layer width",
    "train.steps": "optimizer steps",
    "train.weight_decay": "L2 penalty added to weight gradients",
    "train.context": "pool context units into the clip feature",
    "train.regression": "train and apply boundary offset regression",
    "synth.n_videos": "training videos",
    "synth.n_test_videos": "test videos",
    "synth.units_per_video": "units per video",
    "synth.feature_dim": "unit feature dimension D",
    "synth.unit_frames": "frames per unit",
    "synth.fps": "frames per second",
    "synth.n_classes": "action classes",
    "synth.actions_per_video": "min and max actions per video",
    "synth.duration_scales": "action lengths in units",
    "synth.noise_sigma": "background noise standard deviation",
    "synth.signal_gain": "action signal amplitude",
    "synth.boundary_ramp_units": "units over which the signal ramps in at each boundary",
    "propose.nms_threshold": "suppress proposals with tIoU above this against a better one",
    "baseline.window_frames": "sliding window lengths in frames",
    "baseline.overlap": "sliding window overlap fraction",
    "baseline.count": "random proposals per video (null: the sliding-window count of that video)",
    "eval.ar_grid": "tIoU thresholds averaged by AR",
    "eval.tiou_grid": "tIoU thresholds of the recall_tiou curve",
    "eval.f_values": "proposals per second for ar_f",
    "eval.n_values": "proposals per video for ar_n",
    "eval.an_ratios": "retrieval ratios for ar_an",
    "eval.recall_frequency": "proposals per second used by recall_tiou",
    "eval.map_thresholds": "tIoU thresholds of the map curve",
    "io.data": "dataset split directory holding manifest.json and annotations.json",
    "io.out": "output path",
    "io.checkpoint": "model checkpoint",
    "io.proposals": "proposal JSON-lines file",
    "io.annotations": "annotation JSON file",
}


def _error_line(kind: str, code: int, message: str) -> str:
    return json.dumps({"error": kind, "exit_code": code, "message": message})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(_error_line("usage", EXIT_USAGE, f"{self.prog}: {message}") + "\n")
        raise SystemExit(EXIT_USAGE)


def _fmt_default(v) -> str:
    if isinstance(v, list):
        return " ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def _add_flags(p: argparse.ArgumentParser, section: str, keys: Optional[Sequence[str]] = None,
               required: Sequence[str] = ()) -> None:
    group = p.add_argument_group(f"{section} settings")
    for key, default in SECTION_DEFAULTS[section].items():
        if keys is not None and key not in keys:
            continue
        flag = "--" + key.replace("_", "-")
        dest = f"{section}.{key}"
        desc = DESCRIPTIONS.get(dest, key)
        if section == "io":
            need = " (required)" if key in required else ""
            group.add_argument(flag, dest=dest, default=None, metavar="PATH", help=desc + need)
            continue
        help_text = f"{desc} (default: {_fmt_default(default)}; {provenance(section, key)})"
        if isinstance(default, bool):
            group.add_argument(flag, dest=dest, default=None, action=argparse.BooleanOptionalAction,
                               help=help_text)
        elif isinstance(default, list):
            typ = int if all(isinstance(d, int) for d in default) else float
            group.add_argument(flag, dest=dest, default=None, nargs="+", type=typ, metavar=key.upper(),
                               help=help_text)
        elif default is None:
            group.add_argument(flag, dest=dest, default=None, type=int, metavar=key.upper(), help=help_text)
        else:
            group.add_argument(flag, dest=dest, default=None, type=type(default), metavar=key.upper(),
                               help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run settings")
    g.add_argument("--config", default=None, metavar="FILE", help="JSON run configuration")
    g.add_argument("--seed", dest="top.seed", type=int, default=None, metavar="N",
                   help="global seed; per-purpose seeds are derived from it (default: 0)")
    g.add_argument("--threads", dest="top.threads", type=int, default=None, metavar="N",
                   help="worker and BLAS threads (default: 1, which keeps outputs reproducible)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="unitprop", description="Temporal action proposals by unit regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    _add_flags(p, "synth")
    _add_flags(p, "io", ["out"], required=["out"])

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset split")
    _add_flags(p, "pyramid")
    _add_flags(p, "train")
    _add_flags(p, "io", ["data", "out"], required=["data", "out"])

    p = sub.add_parser("propose", parents=[common], help="write proposals for a dataset split")
    _add_flags(p, "propose")
    _add_flags(p, "io", ["checkpoint", "data", "out"], required=["checkpoint", "data", "out"])

    p = sub.add_parser("baseline", parents=[common], help="write sliding-window or random proposals")
    p.add_argument("kind", choices=["sliding", "random"])
    _add_flags(p, "baseline")
    _add_flags(p, "io", ["data", "out"], required=["data", "out"])

    p = sub.add_parser("eval", parents=[common], help="evaluate a proposal file")
    p.add_argument("--metric", required=True, choices=["ar_f", "ar_an", "ar_n", "recall_tiou", "map"])
    _add_flags(p, "eval")
    _add_flags(p, "io", ["proposals", "annotations", "out"], required=["proposals", "annotations", "out"])

    p = sub.add_parser("correlate", parents=[common],
                       help="Pearson correlation between proposal quality and another metric")
    p.add_argument("--entry", nargs=2, action="append", metavar=("PROPOSALS", "VALUE"), default=[],
                   help="a proposal file and the metric value (e.g. mAP) it achieved; repeat")
    p.add_argument("--series", metavar="CSV", default=None,
                   help="CSV whose first column is correlated with each other column")
    _add_flags(p, "eval", ["ar_grid"])
    _add_flags(p, "io", ["annotations", "out"])

    p = sub.add_parser("bench", parents=[common], help="measure scoring throughput")
    p.add_argument("--repeat", type=int, default=3, help="timed passes over the dataset (default: 3)")
    _add_flags(p, "io", ["checkpoint", "data", "out"], required=["checkpoint", "data"])
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for dest, value in vars(args).items():
        if value is None or "." not in dest:
            continue
        section, key = dest.split(".", 1)
        cfg.set(None if section == "top" else section, key, value)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _require(cfg: RunConfig, key: str) -> Path:
    value = cfg.get("io", key)
    if value is None:
        raise ConfigError(f"missing required setting io.{key} (--{key})")
    return Path(value)


def _write_sidecar(out: Path, cfg: RunConfig, command: str) -> None:
    Path(str(out) + ".config.json").write_text(cfg.echo(command))


def _load_store(data: Path, threads: int):
    manifest, _ = find_dataset_files(data)
    store = load_store(manifest, threads=threads)
    log.info("loaded %d videos from %s", len(store), manifest)
    return store


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _require(cfg, "out")
    meta = generate(cfg.synth_config(), out)
    (out / "run_config.json").write_text(cfg.echo("synth"))
    _emit({"out": str(out), "oracle": meta["oracle"]})
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data, out = _require(cfg, "data"), _require(cfg, "out")
    pcfg, tcfg = cfg.pyramid_config(), cfg.train_config()
    store = _load_store(data, cfg.threads)
    annotations = load_annotations(find_dataset_files(data)[1])
    params, trace = train(store, annotations, pcfg, tcfg)
    meta = {
        "pyramid": {"scales": list(pcfg.scales), "n_ctx": pcfg.n_ctx},
        "model": {"context": tcfg.context, "regression": tcfg.regression},
        "config": cfg.to_dict(),
    }
    save_checkpoint(out, params, meta)
    Path(str(out) + ".loss.csv").write_text(trace.to_csv())
    _write_sidecar(out, cfg, "train")
    _emit({"checkpoint": str(out), "steps": len(trace),
           "final_loss": trace.total[-1] if len(trace) else None})
    return 0


def _model_settings(meta: dict):
    try:
        pcfg = PyramidConfig(tuple(meta["pyramid"]["scales"]), int(meta["pyramid"]["n_ctx"]))
        return pcfg, bool(meta["model"]["context"]), bool(meta["model"]["regression"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header lacks model settings: {exc}") from None


def _check_dims(params, store, context: bool) -> None:
    want = store.dim * (3 if context else 1)
    if params.in_dim != want:
        raise CheckpointError(f"checkpoint takes {params.in_dim} inputs, features give {want}")


def cmd_propose(cfg: RunConfig, args) -> int:
    ckpt, data, out = _require(cfg, "checkpoint"), _require(cfg, "data"), _require(cfg, "out")
    params, meta = load_checkpoint(ckpt)
    pcfg, context, regression = _model_settings(meta)
    store = _load_store(data, cfg.threads)
    _check_dims(params, store, context)
    thr = cfg.get("propose", "nms_threshold")
    if not 0.0 <= thr <= 1.0:
        raise ConfigError(f"propose.nms_threshold must be in [0, 1], got {thr}")

    def one(vid):
        return propose_video(params, store[vid], pcfg, thr, context, regression)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        per_video = list(pool.map(one, store.ids))
    proposals = sort_proposals(p for ps in per_video for p in ps)
    write_proposals(out, proposals)
    _write_sidecar(out, cfg, "propose")
    _emit({"proposals": str(out), "count": len(proposals), "videos": len(store)})
    return 0


def _sliding_count(rec, window_frames, overlap) -> int:
    # window count without drawing scores
    return len(sliding_window_baseline(rec, window_frames, overlap, np.random.default_rng(0)))


def cmd_baseline(cfg: RunConfig, args) -> int:
    data, out = _require(cfg, "data"), _require(cfg, "out")
    store = _load_store(data, cfg.threads)
    windows = cfg.get("baseline", "window_frames")
    overlap = cfg.get("baseline", "overlap")
    count = cfg.get("baseline", "count")
    if not 0 <= overlap < 1 or min(windows) < 1:
        raise ConfigError("baseline needs 0 <= overlap < 1 and positive window lengths")
    if count is not None and count < 0:
        raise ConfigError("baseline.count must be >= 0")
    proposals = []
    for vid in store.ids:
        rec = store[vid]
        rng = np.random.default_rng(derive_seed(cfg.seed, f"baseline:{args.kind}:{vid}"))
        if args.kind == "sliding":
            proposals.extend(sliding_window_baseline(rec, windows, overlap, rng))
        else:
            n = count if count is not None else _sliding_count(rec, windows, overlap)
            proposals.extend(random_baseline(rec, n, rng))
    write_proposals(out, proposals)
    _write_sidecar(out, cfg, f"baseline {args.kind}")
    _emit({"proposals": str(out), "count": len(proposals), "videos": len(store)})
    return 0


def _ground_truth(annotations):
    gts = [g for a in annotations.values() for g in a.actions]
    lengths = {vid: a.duration_s for vid, a in annotations.items()}
    return gts, lengths


def summary_metrics(evaluator: ProposalEvaluator, proposals, gts, ar_grid) -> Dict[str, Optional[float]]:
    dets = [p for p in proposals if isinstance(p, Detection)]
    return {
        "AR@F=1.0": evaluator.average_recall(Frequency(1.0), ar_grid),
        "AR@N=100": evaluator.average_recall(TopN(100), ar_grid),
        "mAP@0.5": detection_map(dets, gts, 0.5) if dets else None,
    }


def cmd_eval(cfg: RunConfig, args) -> int:
    props_path, ann_path, out = (_require(cfg, "proposals"), _require(cfg, "annotations"),
                                 _require(cfg, "out"))
    proposals = read_proposals(props_path)
    annotations = load_annotations(ann_path)
    gts, lengths = _ground_truth(annotations)
    ev = ProposalEvaluator(gts, proposals, lengths)
    e = cfg.sections["eval"]
    ar_grid = e["ar_grid"]
    metric = args.metric
    if metric == "ar_f":
        text = format_curve_csv(evaluator_curve(ev, "F", e["f_values"], ar_grid))
    elif metric == "ar_n":
        text = format_curve_csv(evaluator_curve(ev, "N", e["n_values"], ar_grid))
    elif metric == "ar_an":
        text = format_curve_csv(evaluator_curve(ev, "AN", e["an_ratios"], ar_grid))
    elif metric == "recall_tiou":
        pts = recall_x_tiou(gts, proposals, Frequency(e["recall_frequency"]), lengths, e["tiou_grid"])
        text = format_curve_csv(pts, ("tiou", "recall"))
    else:
        dets = [p for p in proposals if isinstance(p, Detection)]
        if proposals and not dets:
            raise ProposalFormatError(f"{props_path}: map needs detections with a 'label' field")
        rows = ["tiou,map"] + [f"{t:.6g},{detection_map(dets, gts, t):.6g}" for t in e["map_thresholds"]]
        text = "\n".join(rows) + "\n"
    out.write_text(text)
    summary = summary_metrics(ev, proposals, gts, ar_grid)
    summary.update({"metric": metric, "n_ground_truths": len(ev.gts), "n_videos": len(lengths),
                    "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds")})
    Path(str(out) + ".summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_sidecar(out, cfg, f"eval {metric}")
    _emit(summary)
    return 0


def _read_series(path: Path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ProposalFormatError(f"{path}: empty series file")
    header = rows[0]
    try:
        float(header[0])
        names = [f"column_{i}" for i in range(len(header))]
    except ValueError:
        names, rows = header, rows[1:]
    try:
        cols = list(zip(*[[float(x) for x in r] for r in rows]))
    except ValueError as exc:
        raise ProposalFormatError(f"{path}: {exc}") from None
    if len(cols) < 2:
        raise ProposalFormatError(f"{path}: need at least two columns")
    return names, cols


def cmd_correlate(cfg: RunConfig, args) -> int:
    result = {}
    ar_grid = cfg.get("eval", "ar_grid")
    if args.entry:
        ann = _require(cfg, "annotations")
        gts, lengths = _ground_truth(load_annotations(ann))
        series: Dict[str, List[float]] = {"AR@F=1.0": [], "AR@N=100": [], "AR@AN=100": []}
        values = []
        for path, value in args.entry:
            try:
                values.append(float(value))
            except ValueError:
                raise ConfigError(f"--entry value {value!r} is not a number") from None
            ev = ProposalEvaluator(gts, read_proposals(path), lengths)
            series["AR@F=1.0"].append(ev.average_recall(Frequency(1.0), ar_grid))
            series["AR@N=100"].append(ev.average_recall(TopN(100), ar_grid))
            series["AR@AN=100"].append(ev.average_recall(Ratio(ev.ratio_for_average_number(100)), ar_grid))
        result["entries"] = {"files": [p for p, _ in args.entry], "values": values, "metrics": series}
        result["pearson"] = {name: pearson(xs, values) for name, xs in series.items()}
    if args.series:
        names, cols = _read_series(Path(args.series))
        result["series_pearson"] = {names[i]: pearson(cols[0], cols[i]) for i in range(1, len(cols))}
    if not result:
        raise ConfigError("correlate needs --entry pairs or --series")
    out = cfg.get("io", "out")
    if out is not None:
        Path(out).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        _write_sidecar(Path(out), cfg, "correlate")
    _emit(result)
    return 0


def run_bench(params, store, pcfg: PyramidConfig, context: bool, repeat: int = 3, chunk: int = 8192) -> dict:
    """Time feature pooling plus the forward pass over every pyramid clip."""
    spans = [pyramid_arrays(rec.n_units, pcfg.scales) for rec in store]
    n_clips = sum(len(s) for s, _ in spans)
    n_units = sum(rec.n_units for rec in store)
    unit_frames = next(iter(store)).unit_frames
    t0 = time.perf_counter()
    for _ in range(repeat):
        bank = FeatureBank(list(store), pcfg.n_ctx, context)
        for vidx, (s, e) in enumerate(spans):
            score_clips(params, bank, vidx, s, e, chunk)
    elapsed = time.perf_counter() - t0
    return {
        "videos": len(store),
        "clips_per_pass": n_clips,
        "units_per_pass": n_units,
        "unit_frames": unit_frames,
        "passes": repeat,
        "elapsed_s": elapsed,
        "clips_per_second": n_clips * repeat / elapsed,
        "frames_per_second": n_units * unit_frames * repeat / elapsed,
        "fps_definition": FPS_DEFINITION,
    }


def cmd_bench(cfg: RunConfig, args) -> int:
    ckpt, data = _require(cfg, "checkpoint"), _require(cfg, "data")
    if args.repeat < 1:
        raise ConfigError("--repeat must be >= 1")
    params, meta = load_checkpoint(ckpt)
    pcfg, context, _ = _model_settings(meta)
    store = _load_store(data, cfg.threads)
    _check_dims(params, store, context)
    report = run_bench(params, store, pcfg, context, args.repeat)
    report["threads"] = cfg.threads
    out = cfg.get("io", "out")
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"{report['clips_per_second']:.0f} clips/s, {report['frames_per_second']:.0f} frames/s "
          f"where {FPS_DEFINITION}", file=sys.stderr)
    _emit(report)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "propose": cmd_propose,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "correlate": cmd_correlate,
    "bench": cmd_bench,
}


def _classify(exc: BaseException):
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (MissingInputError, FileNotFoundError)):
        return "missing_file", EXIT_MISSING
    if isinstance(exc, (FeatureFormatError, ProposalFormatError, CheckpointError)):
        return "format", EXIT_FORMAT
    if isinstance(exc, (TrainingConfigError, NonFiniteError)):
        return "training", EXIT_TRAINING
    if isinstance(exc, EvaluationError):
        return "evaluation", EXIT_EVAL
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        kind = _classify(exc)
        if kind is None:
            raise
        sys.stderr.write(_error_line(kind[0], kind[1], str(exc)) + "\n")
        return kind[1]


if __name__ == "__main__":
    sys.exit(main())
