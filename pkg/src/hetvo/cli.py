"""Command-line pipeline: ``hetvo <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 invalid input
data, 4 numerical failure, 5 file-system error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import fileio
from .config import load_config
from .exceptions import (
    ConfigError,
    FormatError,
    GimbalLock,
    HetvoError,
    NearPiRotation,
    NotPositiveDefinite,
    SingularSystem,
)
from .geometry import relative
from .metrics import ate, corrected_relatives, integrate, relative_segment_errors, report
from .metrics import MetricsReport
from .posegraph import build_graph, optimize
from .regressor import HeteroscedasticRegressor
from .synthetic import gen_dataset

log = logging.getLogger("hetvo")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _outputs_distinct(inputs, outputs):
    ins = {os.path.realpath(p) for p in inputs if p}
    for p in outputs:
        if p and os.path.realpath(p) in ins:
            raise UsageError(f"output {p} would overwrite an input file")


def _need(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _config(args, extra=None):
    overrides = {"cov_kind": getattr(args, "cov_kind", None)}
    if getattr(args, "fractions", None):
        overrides["fractions"] = [float(x) for x in args.fractions.split(",")]
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _seed(args, cfg_value, flag="--seed"):
    seed = args.seed if args.seed is not None else cfg_value
    if seed is None:
        raise UsageError(f"{flag} is required (or set it in the config file)")
    return seed


def _write_report(prefix, rep, est, gt, fractions, extra_series=()):
    text = fileio.format_key_values(fileio.report_items(rep))
    sys.stdout.write(text)
    if prefix:
        with open(prefix + ".txt", "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        with open(prefix + ".segments.tsv", "w", encoding="ascii", newline="\n") as fh:
            fh.write(fileio.segment_table(est, gt, fractions))
        with open(prefix + ".trajectory.tsv", "w", encoding="ascii", newline="\n") as fh:
            fh.write(fileio.trajectory_table(gt, [("est", est), *extra_series]))


def _ground_truth(ds):
    if not ds.gt_poses:
        raise FormatError("sample file carries no ground truth")
    return ds.gt_poses


def _predictions_for(ds, path):
    pred = fileio.read_predictions(path)
    if len(pred) != len(ds):
        raise FormatError(f"{path} holds {len(pred)} predictions for {len(ds)} samples")
    return pred


# --- commands ------------------------------------------------------------------


def cmd_synth_gen(args):
    cfg = _config(args, {
        "trajectory.length": args.length,
        "noise.kind": args.noise_kind,
        "noise.error_mode": args.error_mode,
        "noise.zero_noise": True if args.zero_noise else None,
    })
    seed = _seed(args, cfg.seeds.data)
    out = _need(args.out or cfg.paths.samples, "--out")
    ds = gen_dataset(cfg.trajectory.build(), cfg.noise.build(), seed, force_mean=cfg.noise.zero_noise, error_mode=cfg.noise.error_mode)
    fileio.write_samples(out, ds)
    if args.gt_out:
        fileio.write_kitti_poses(args.gt_out, ds.gt_poses)
    if args.vo_out:
        fileio.write_kitti_poses(args.vo_out, ds.vo_trajectory())
    log.info("wrote %d samples to %s (seed %d)", len(ds), out, seed)


def cmd_fit(args):
    cfg = _config(args, {
        "train.learning_rate": args.lr,
        "train.max_epochs": args.epochs,
        "train.patience": args.patience,
        "train.dropout": args.dropout,
        "train.zero_mean": True if args.zero_mean else None,
    })
    seed = _seed(args, cfg.seeds.train)
    samples = _need(args.samples or cfg.paths.samples, "--samples")
    val = args.val or cfg.paths.validation
    out = _need(args.out or cfg.paths.model, "--out")
    _outputs_distinct([samples, val], [out, args.log])
    ds = fileio.read_samples(samples)
    t = cfg.train
    est = HeteroscedasticRegressor(
        hidden_layer_sizes=tuple(t.hidden),
        cov_kind=cfg.cov_kind,
        learning_rate=t.learning_rate,
        batch_size=t.batch_size,
        max_epochs=t.max_epochs,
        patience=t.patience,
        dropout=t.dropout,
        zero_mean=t.zero_mean,
        validation_fraction=t.validation_fraction,
        random_state=seed,
    )
    if val:
        vds = fileio.read_samples(val)
        est.fit(ds.features, ds.errors, vds.features, vds.errors)
    else:
        est.fit(ds.features, ds.errors)
    fileio.save_checkpoint(out, est.model_)
    tl = est.training_log_
    if args.log:
        rows = [(k, a, b) for k, (a, b) in enumerate(zip(tl.train_loss, tl.val_loss))]
        with open(args.log, "w", encoding="ascii", newline="\n") as fh:
            fh.write(fileio.format_table(["epoch", "train_nll", "val_nll"], rows))
    sys.stdout.write(fileio.format_key_values([
        ("epochs", str(len(tl.val_loss))),
        ("best_epoch", str(tl.best_epoch)),
        ("best_val_nll", fileio.fmt(tl.val_loss[tl.best_epoch])),
        ("seed", str(seed)),
    ]))


def cmd_predict(args):
    cfg = _config(args)
    model_path = _need(args.model or cfg.paths.model, "--model")
    samples = _need(args.samples or cfg.paths.samples, "--samples")
    out = _need(args.out or cfg.paths.predictions, "--out")
    _outputs_distinct([model_path, samples], [out])
    model = fileio.load_checkpoint(model_path)
    ds = fileio.read_samples(samples)
    pred = HeteroscedasticRegressor.from_model(model).predict_gaussian(ds.features)
    fileio.write_predictions(out, pred)


def cmd_correct(args):
    cfg = _config(args)
    samples = _need(args.samples or cfg.paths.samples, "--samples")
    preds = _need(args.predictions or cfg.paths.predictions, "--predictions")
    out = _need(args.out, "--out")
    _outputs_distinct([samples, preds], [out])
    ds = fileio.read_samples(samples)
    pred = _predictions_for(ds, preds)
    start = ds.gt_poses[0] if ds.gt_poses else None
    rel = corrected_relatives(ds.vo_relative, pred.mu, ds.error_mode)
    fileio.write_kitti_poses(out, integrate(rel, start).poses)


def cmd_eval(args):
    cfg = _config(args)
    samples = _need(args.samples or cfg.paths.samples, "--samples")
    ds = fileio.read_samples(samples)
    gt = _ground_truth(ds)
    if args.trajectory:
        est = fileio.parse_kitti_poses(args.trajectory)
        source = "file"
    else:
        est = ds.vo_trajectory()
        source = "vo"
    _outputs_distinct([samples, args.trajectory], [args.out and args.out + s for s in (".txt", ".segments.tsv", ".trajectory.tsv")])
    t, r = ate(est, gt)
    segs = relative_segment_errors(est, gt, cfg.fractions)
    rep = MetricsReport(t, r, segs, meta={"segment_error": "endpoint", "alignment": "first-pose", "estimate": source})
    _write_report(args.out, rep, est, gt, cfg.fractions)


def cmd_report(args):
    cfg = _config(args)
    samples = _need(args.samples or cfg.paths.samples, "--samples")
    ds = fileio.read_samples(samples)
    gt = _ground_truth(ds)
    preds = args.predictions or cfg.paths.predictions
    pred = _predictions_for(ds, preds) if preds else None
    _outputs_distinct([samples, preds], [args.out and args.out + s for s in (".txt", ".segments.tsv", ".trajectory.tsv")])
    rep = report(ds, pred, cfg.fractions, correct=not args.no_correct)
    rel = ds.vo_relative
    if pred is not None and not args.no_correct:
        rel = corrected_relatives(rel, pred.mu, ds.error_mode)
    est = integrate(rel, gt[0])
    extra = [("vo", ds.vo_trajectory())] if rel is not ds.vo_relative else []
    _write_report(args.out, rep, est, gt, cfg.fractions, extra)


def cmd_graph_opt(args):
    cfg = _config(args, {"loop_scale": args.loop_scale})
    lm = cfg.lm.build()
    if args.graph:
        _outputs_distinct([args.graph], [args.out, args.graph_out, args.stats])
        graph = fileio.parse_graph(args.graph)
    else:
        samples = _need(args.samples or cfg.paths.samples, "--samples or --graph")
        preds = args.predictions or cfg.paths.predictions
        _outputs_distinct([samples, preds], [args.out, args.graph_out, args.stats])
        ds = fileio.read_samples(samples)
        rel = ds.vo_relative
        if args.weighting == "learned" or not args.no_correct:
            if not preds:
                raise UsageError("--predictions is required unless --weighting identity --no-correct")
            pred = _predictions_for(ds, preds)
            if not args.no_correct:
                rel = corrected_relatives(rel, pred.mu, ds.error_mode)
        covs = pred.covariance() if args.weighting == "learned" else [np.eye(6)] * len(rel)
        loop = None
        if not args.no_loop:
            gt = _ground_truth(ds)
            loop = (relative(gt[-1], gt[0]), cfg.loop_scale * np.eye(6))
        start = ds.gt_poses[0] if ds.gt_poses else None
        graph = build_graph(zip(rel, covs), loop, start)
    if args.graph_out:
        fileio.write_graph(args.graph_out, graph)
    result, stats = optimize(graph, lm)
    items = fileio.stats_items(stats) + [("residual_model", "twist-log, information used unrotated (small-angle)")]
    text = fileio.format_key_values(items)
    sys.stdout.write(text)
    if args.stats:
        with open(args.stats, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    if args.out:
        fileio.write_kitti_poses(args.out, result.poses)


# --- parser --------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--cov-kind", choices=("ldl", "chol"), help="covariance parameterization (default ldl)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="hetvo", description="Learned VO error models: data, training, correction, evaluation and pose graphs.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic sample file")
    s.add_argument("--seed", type=int, help="random seed (required)")
    s.add_argument("--length", type=int, help="number of poses")
    s.add_argument("--noise-kind", choices=("constant", "linear", "smooth-nonlinear"))
    s.add_argument("--error-mode", choices=("right", "left"))
    s.add_argument("--zero-noise", action="store_true", help="noise-free VO")
    s.add_argument("--out", help="sample file to write")
    s.add_argument("--gt-out", help="also write ground truth as KITTI poses")
    s.add_argument("--vo-out", help="also write the integrated VO trajectory as KITTI poses")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("fit", parents=[common], help="train a regressor and write a checkpoint")
    s.add_argument("--seed", type=int, help="random seed (required)")
    s.add_argument("--samples", help="training sample file")
    s.add_argument("--val", help="validation sample file (default: hold out part of --samples)")
    s.add_argument("--out", help="checkpoint to write")
    s.add_argument("--log", help="per-epoch loss table (TSV)")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--zero-mean", action="store_true", help="fit N(0, Sigma(x)) only")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="write a prediction file")
    s.add_argument("--model", help="checkpoint")
    s.add_argument("--samples", help="sample file")
    s.add_argument("--out", help="prediction file to write")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("correct", parents=[common], help="apply predicted corrections and write the trajectory")
    s.add_argument("--samples")
    s.add_argument("--predictions")
    s.add_argument("--out", help="KITTI pose file to write")
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("eval", parents=[common], help="ATE and segment errors of a trajectory")
    s.add_argument("--samples", help="sample file holding the ground truth")
    s.add_argument("--trajectory", help="estimated KITTI poses (default: raw VO)")
    s.add_argument("--fractions", help="comma-separated segment fractions")
    s.add_argument("--out", help="output prefix for .txt, .segments.tsv and .trajectory.tsv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("graph-opt", parents=[common], help="covariance-weighted pose-graph optimization")
    s.add_argument("--graph", help="graph text file to optimize instead of building one")
    s.add_argument("--samples")
    s.add_argument("--predictions")
    s.add_argument("--weighting", choices=("learned", "identity"), default="learned")
    s.add_argument("--no-correct", action="store_true", help="keep raw VO increments")
    s.add_argument("--no-loop", action="store_true", help="omit the ground-truth loop edge")
    s.add_argument("--loop-scale", type=float, help="loop-edge covariance scale (default 1e-6)")
    s.add_argument("--graph-out", help="write the graph before optimization")
    s.add_argument("--stats", help="write optimizer statistics (key-value)")
    s.add_argument("--out", help="optimized KITTI poses")
    s.set_defaults(func=cmd_graph_opt)

    s = sub.add_parser("report", parents=[common], help="full metrics report with calibration")
    s.add_argument("--samples")
    s.add_argument("--predictions")
    s.add_argument("--no-correct", action="store_true", help="evaluate the uncorrected trajectory")
    s.add_argument("--fractions", help="comma-separated segment fractions")
    s.add_argument("--out", help="output prefix for .txt, .segments.tsv and .trajectory.tsv")
    s.set_defaults(func=cmd_report)
    return p


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (SingularSystem, NotPositiveDefinite, NearPiRotation, GimbalLock)):
        return EXIT_NUMERIC
    if isinstance(exc, (HetvoError, ValueError)):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # categorized below; anything else is a bug
        code = _exit_code(exc)
        if code is None:
            raise
        kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERIC: "numerical", EXIT_IO: "io"}[code]
        print(f"hetvo {args.command}: {kind} error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
