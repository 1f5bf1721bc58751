"""Command-line interface: ``gbforest {fit,predict,simulate,cv,range,proximity}``.

Exit codes: 0 on success, 2 for invalid flags, 3 when data loading or
fitting fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys

import numpy as np

from . import io as model_io
from .evaluation import Schema, cv_evaluate, load_csv, load_points, load_schema
from .gbf import MAX_STAGES, RESIDUAL_SOURCES, VARIANCE_MODES, GeneralisedBoostedForest, normal_interval
from .sim import fmt, load_config, run_grid, summarize, write_dict_rows, write_records_csv

FAMILIES = ("binomial", "poisson", "gaussian")
EXIT_USAGE = 2
EXIT_FAILURE = 3
HELP_WIDTH = 88


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH)


def _stage_count(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unsupported stage count {text!r}; expected 0, 1 or 2") from None
    if not 0 <= v <= MAX_STAGES:
        raise argparse.ArgumentTypeError(f"unsupported stage count {v}; expected 0, 1 or 2")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"sample fraction must lie in (0, 1], got {v}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _level(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"level must lie in [0, 1), got {v}")
    return v


def _add_data_args(p):
    p.add_argument("--data", required=True, help="training CSV with a header row")
    p.add_argument("--schema", help="JSON schema file (keys: response, trials, features, categorical)")
    p.add_argument("--response", help="response column, when no --schema is given")
    p.add_argument("--trials", help="binomial trial-count column, when no --schema is given")
    p.add_argument("--categorical", default="", help="comma-separated columns to one-hot encode")
    p.add_argument("--family", required=True, choices=FAMILIES, help="response family")


def _add_model_args(p):
    p.add_argument("--n-estimators", type=_positive_int, default=500, help="trees per forest")
    p.add_argument("--sample-fraction", type=_fraction, default=0.4, help="per-tree subsample share")
    p.add_argument("--mtry", type=_positive_int, default=None, help="features tried per split (None: p // 3)")
    p.add_argument("--min-node-size", type=_positive_int, default=5, help="minimum samples per leaf")
    p.add_argument("--max-depth", type=_positive_int, default=None, help="maximum tree depth (None: unlimited)")
    p.add_argument("--stages", type=_stage_count, default=2, help="number of boosted forests (0, 1 or 2)")
    p.add_argument("--variance-mode", choices=VARIANCE_MODES, default="corrected",
                   help="Monte-Carlo term handling")
    p.add_argument("--residual-source", choices=RESIDUAL_SOURCES, default="in_sample",
                   help="training-point predictions used for the next stage's residuals")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gbforest", formatter_class=_formatter,
        description="Generalised boosted forests with infinitesimal-jackknife variance estimates.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", formatter_class=_formatter, help="fit a model and save it",
                       description="Fit a model on a CSV and write a model file.")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("predict", formatter_class=_formatter, help="predict with variance and intervals",
                       description="Predict at the rows of a CSV; writes estimates, variances and intervals.")
    p.add_argument("--model", required=True, help="model file from 'fit'")
    p.add_argument("--points", required=True, help="CSV of points with the training feature columns")
    p.add_argument("--level", type=_level, default=0.95, help="confidence level of the link-space interval")
    p.add_argument("--out", default="-", help="output CSV ('-' for stdout)")

    p = sub.add_parser("simulate", formatter_class=_formatter, help="run a simulation grid",
                       description="Run a simulation grid described by a key = value config file.")
    p.add_argument("--config", required=True, help="config file (or inline 'key = value' text)")
    p.add_argument("--out", required=True, help="per-replicate CSV to write")
    p.add_argument("--summary", default=None, help="optional per-point summary CSV")
    p.add_argument("--seed", type=int, default=None, help="random seed (None: the config's seed)")

    p = sub.add_parser("cv", formatter_class=_formatter, help="k-fold cross-validated evaluation",
                       description="Cross-validated per-stage MSE, average variance, coverage and log-likelihood.")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--folds", type=_positive_int, default=10, help="number of folds")
    p.add_argument("--out", default=None, help="optional CSV of the per-stage table")

    p = sub.add_parser("range", formatter_class=_formatter, help="bounds on link-space predictions",
                       description="Print the interval that every link-space prediction lies in, per stage.")
    p.add_argument("--model", required=True, help="model file from 'fit'")

    p = sub.add_parser("proximity", formatter_class=_formatter, help="training points sharing leaves with a point",
                       description="List training rows by descending proximity to a point (ties by row index).")
    p.add_argument("--model", required=True, help="model file from 'fit'")
    p.add_argument("--point", required=True, help="comma-separated feature values, in training column order")
    p.add_argument("--forest", type=_positive_int, default=1, help="which forest (1-based stage index)")
    p.add_argument("--top-k", type=_positive_int, default=10, help="number of rows to list")
    return parser


def _schema(args):
    if args.schema:
        return load_schema(args.schema)
    if not args.response:
        raise _UsageError("either --schema or --response is required")
    cats = [c for c in args.categorical.split(",") if c]
    return Schema(args.response, args.trials, None, cats)


def _estimator(args):
    return GeneralisedBoostedForest(
        family=args.family, n_estimators=args.n_estimators, sample_fraction=args.sample_fraction,
        mtry=args.mtry, min_node_size=args.min_node_size, max_depth=args.max_depth, stages=args.stages,
        variance_mode=args.variance_mode, residual_source=args.residual_source, random_state=args.seed)


class _UsageError(Exception):
    pass


def cmd_fit(args, out=None):
    out = out or sys.stdout
    schema = _schema(args)
    data = load_csv(args.data, schema)
    model = _estimator(args).fit(data.X, data.y, data.trials)
    model.annotations_ = dict(feature_names=data.feature_names, schema=dataclasses.asdict(schema))
    model_io.save_model(model, args.out)
    for s, ll in enumerate(model.train_log_lik_):
        print(f"stage {s}: training log-likelihood {ll:.6f}", file=out)
    return 0


def cmd_predict(args, out=None):
    out = out or sys.stdout
    model = model_io.load_model(args.model)
    names = model.annotations_.get("feature_names")
    X = load_points(args.points, names) if names else np.loadtxt(args.points, delimiter=",", skiprows=1, ndmin=2)
    pred = model.predict_with_variance(X)
    lo, hi = normal_interval(pred.link_estimate, pred.link_variance, args.level)
    fh = out if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_estimate", "link_variance", "response_estimate", "response_variance",
                    "ci_lower", "ci_upper"])
        for row in zip(pred.link_estimate, pred.link_variance, pred.response_estimate,
                       pred.response_variance, lo, hi):
            w.writerow([fmt(v) for v in row])
    finally:
        if fh is not out:
            fh.close()
    return 0


def cmd_simulate(args, out=None):
    out = out or sys.stdout
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    records = run_grid(cfg)
    write_records_csv(records, args.out)
    if args.summary:
        write_dict_rows(summarize(records, cfg), args.summary)
    bad = sum(r.status != "ok" for r in records)
    print(f"{len(records)} replicates written to {args.out}" + (f" ({bad} flagged)" if bad else ""), file=out)
    return 0


def cmd_cv(args, out=None):
    out = out or sys.stdout
    data = load_csv(args.data, _schema(args))
    report = cv_evaluate(data, args.family, _estimator(args), seed=args.seed, k=args.folds)
    print(report.to_text(), file=out)
    if args.out:
        report.to_csv(args.out)
    return 0


def cmd_range(args, out=None):
    out = out or sys.stdout
    model = model_io.load_model(args.model)
    print(f"eta0 {fmt(model.eta0_)}", file=out)
    for s in range(len(model.forests_) + 1):
        lo, hi = model.prediction_range(s)
        print(f"stage {s}: lower {fmt(lo)} upper {fmt(hi)}", file=out)
    return 0


def cmd_proximity(args, out=None):
    out = out or sys.stdout
    model = model_io.load_model(args.model)
    if not model.forests_:
        raise ValueError("model has no forests")
    if args.forest > len(model.forests_):
        raise _UsageError(f"--forest {args.forest} exceeds the model's {len(model.forests_)} forests")
    try:
        x = np.array([float(v) for v in args.point.split(",")])
    except ValueError:
        raise _UsageError("--point must be comma-separated numbers") from None
    if x.shape[0] != model.n_features_in_:
        raise _UsageError(f"--point has {x.shape[0]} values, the model expects {model.n_features_in_}")
    scores, never = model.forests_[args.forest - 1].proximity_scores(x)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[: args.top_k]
    print("index,proximity", file=out)
    for i in order:
        print(f"{i},{fmt(scores[i])}" + (",never_in_bag" if never[i] else ""), file=out)
    return 0


COMMANDS = dict(fit=cmd_fit, predict=cmd_predict, simulate=cmd_simulate, cv=cmd_cv,
                range=cmd_range, proximity=cmd_proximity)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _UsageError as e:
        parser.exit(EXIT_USAGE, f"gbforest {args.command}: error: {e}\n")
    except (ValueError, OSError) as e:
        print(f"gbforest {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
