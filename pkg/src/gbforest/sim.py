"""Simulation grid for binomial and Poisson generalised boosted forests.

Covariates are uniform on ``[-1, 1]^m``; the link-space signal is either the
sum of the first five coordinates or ``||x|| - sqrt(m)/2``.  Every replicate
draws fresh training data, fits one two-forest model and evaluates the
constant, one-forest and two-forest predictions on a test set that is fixed
for a given master seed.

Randomness comes from Philox streams keyed by
``(master seed, cell coordinates, replicate, purpose)``, so the output does
not depend on the order in which cells or replicates are run.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import metrics
from .family import get_family
from .gbf import GeneralisedBoostedForest, normal_interval

__all__ = [
    "SimConfig",
    "ExperimentRecord",
    "gen_covariates",
    "signal_linear",
    "signal_norm",
    "fixed_points",
    "gen_response",
    "true_link",
    "run_grid",
    "write_records_csv",
    "summarize",
    "load_config",
]

log = logging.getLogger(__name__)

N_STAGES = 3
N_FIXED = 5
_FAMILY_CODE = {"binomial": 1, "poisson": 2}
_SIGNAL_CODE = {"linear": 1, "norm": 2}
_PURPOSE = {"train_x": 1, "train_y": 2, "test_y": 3, "model": 4, "test_x": 5}


@dataclass(frozen=True)
class SimConfig:
    family: str = "poisson"
    signal: str = "linear"
    n_train: int = 500
    n_test_random: int = 100
    replicates: int = 20
    scales: tuple = (4.0,)
    trials_max: tuple = (4,)
    sample_fractions: tuple = (0.4,)
    n_trees: int = 300
    dim: int = 15
    seed: int = 0
    min_node_size: int = 5
    mtry: int | None = None
    variance_mode: str = "corrected"
    level: float = 0.95

    def __post_init__(self):
        if self.family not in _FAMILY_CODE:
            raise ValueError(f"family must be one of {sorted(_FAMILY_CODE)}")
        if self.signal not in _SIGNAL_CODE:
            raise ValueError(f"signal must be one of {sorted(_SIGNAL_CODE)}")
        for name in ("n_train", "n_test_random", "replicates", "n_trees", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.signal == "linear" and self.dim < 5:
            raise ValueError("the linear signal needs dim >= 5")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if any(not 0 < f <= 1 for f in self.sample_fractions) or not self.sample_fractions:
            raise ValueError("sample fractions must lie in (0, 1]")
        if self.family == "binomial" and (not self.trials_max or any(m < 1 for m in self.trials_max)):
            raise ValueError("trials_max must be positive integers")

    @classmethod
    def full_scale(cls, family, signal="linear", seed=0):
        """Full-scale grid: n=1000, B=1000, 200 replicates."""
        return cls(family=family, signal=signal, n_train=1000, n_test_random=100, replicates=200,
                   scales=(1.0, 2.0, 4.0, 8.0, 16.0), trials_max=(1, 2, 4, 8, 16),
                   sample_fractions=(0.2, 0.4, 0.6, 0.8), n_trees=1000, dim=15, seed=seed)

    def cells(self):
        """Grid cells as ``(scale, trials_max, fraction)``; ``trials_max`` is 0 for Poisson."""
        ms = self.trials_max if self.family == "binomial" else (0,)
        return [(float(s), int(m), float(f)) for s in self.scales for m in ms for f in self.sample_fractions]


@dataclass
class ExperimentRecord:
    family: str
    signal: str
    scale: float
    trials_max: int
    fraction: float
    replicate: int
    status: str = "ok"
    stages: list = field(default_factory=list)  # StageEvaluation per stage
    # per stage, arrays over the five fixed points
    fixed_link: list = field(default_factory=list)
    fixed_var: list = field(default_factory=list)
    fixed_response: list = field(default_factory=list)
    fixed_response_var: list = field(default_factory=list)
    # per stage, coverage indicator over every test point (random then fixed)
    covered: list = field(default_factory=list)

    @property
    def key(self):
        return (self.family, self.signal, self.scale, self.trials_max, self.fraction, self.replicate)


def _rng(cfg, purpose, cell=None, replicate=0):
    key = [_PURPOSE[purpose]]
    if cell is not None:
        scale, m, frac = cell
        key += [_FAMILY_CODE[cfg.family], _SIGNAL_CODE[cfg.signal],
                int(round(scale * 1000)), m, int(round(frac * 1000)), replicate]
    ss = np.random.SeedSequence(entropy=int(cfg.seed) & (2**64 - 1), spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


def _seed_of(rng):
    return int(rng.integers(0, 2**63 - 1))


def gen_covariates(n, m, seed):
    """``n x m`` matrix of independent Uniform(-1, 1) draws.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    return rng.uniform(-1.0, 1.0, size=(n, m))


def signal_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., :5].sum(axis=-1)


def signal_norm(x, m=None):
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[-1] if m is None else m
    return np.linalg.norm(x, axis=-1) - math.sqrt(m) / 2.0


def fixed_points(m):
    """The five fixed evaluation points, shape ``(5, m)``."""
    p3 = np.full(m, 1.0 / (3.0 * math.sqrt(m)))
    p2 = np.zeros(m)
    p2[0] = 1.0 / 3.0
    return np.vstack([np.zeros(m), p2, p3, 2 * p3, 3 * p3])


def true_link(family, f_values, scale):
    """Link-space truth: ``s * f`` (binomial) or ``f + log s`` (Poisson)."""
    f_values = np.asarray(f_values, dtype=np.float64)
    if family == "binomial":
        return scale * f_values
    if family == "poisson":
        return f_values + math.log(scale)
    raise ValueError(f"invalid family {family!r}")


def gen_response(family, f_values, scale, trials_max, seed):
    """Draw responses; returns ``(y, trials)`` with ``trials=None`` for Poisson.

    Binomial trial counts are uniform on ``{1, ..., trials_max}``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    fam = get_family(family)
    link = true_link(family, f_values, scale)
    if family == "binomial":
        trials = rng.integers(1, int(trials_max) + 1, size=link.shape[0]).astype(np.float64)
        y = rng.binomial(trials.astype(np.int64), fam.inv_link(link)).astype(np.float64)
        return y, trials
    return rng.poisson(fam.inv_link(link)).astype(np.float64), None


def _signal(cfg, X):
    return signal_linear(X) if cfg.signal == "linear" else signal_norm(X, cfg.dim)


def evaluation_design(cfg):
    """Random test points followed by the five fixed points."""
    X = np.vstack([gen_covariates(cfg.n_test_random, cfg.dim, _rng(cfg, "test_x")), fixed_points(cfg.dim)])
    return X, _signal(cfg, X)


def run_replicate(cfg, cell, replicate, X_test=None, f_test=None):
    scale, m, frac = cell
    rec = ExperimentRecord(cfg.family, cfg.signal, scale, m, frac, replicate)
    if X_test is None:
        X_test, f_test = evaluation_design(cfg)
    fam = get_family(cfg.family)
    try:
        X = gen_covariates(cfg.n_train, cfg.dim, _rng(cfg, "train_x", cell, replicate))
        y, trials = gen_response(cfg.family, _signal(cfg, X), scale, m, _rng(cfg, "train_y", cell, replicate))
        y_test, trials_test = gen_response(cfg.family, f_test, scale, m, _rng(cfg, "test_y", cell, replicate))
        model = GeneralisedBoostedForest(
            family=cfg.family, n_estimators=cfg.n_trees, sample_fraction=frac, mtry=cfg.mtry,
            min_node_size=cfg.min_node_size, stages=2, variance_mode=cfg.variance_mode,
            random_state=_seed_of(_rng(cfg, "model", cell, replicate)),
        ).fit(X, y, trials)
        staged = model.staged_predict_with_variance(X_test)
    except ValueError as exc:
        log.warning("replicate %s of cell %s failed: %s", replicate, cell, exc)
        rec.status = f"error: {exc}"
        return rec

    truth = true_link(cfg.family, f_test, scale)
    truth_resp = fam.inv_link(truth)
    r = slice(0, cfg.n_test_random)
    fx = slice(cfg.n_test_random, cfg.n_test_random + N_FIXED)
    tr = None if trials_test is None else trials_test[r]
    for s, pred in enumerate(staged):
        lo, hi = normal_interval(pred.link_estimate, pred.link_variance, cfg.level)
        covered = (lo <= truth) & (truth <= hi)
        rec.stages.append(metrics.StageEvaluation(
            stage=s,
            mean_ll=metrics.mean_log_lik(fam, pred.link_estimate[r], y_test[r], tr),
            mse_link=metrics.mse(pred.link_estimate[r], truth[r]),
            mse_response=metrics.mse(pred.response_estimate[r], truth_resp[r]),
            avg_var=float(np.mean(pred.link_variance[r])),
            coverage=float(np.mean(covered[r])),
            abs_bias=float(np.mean(np.abs(pred.link_estimate[r] - truth[r]))),
        ))
        rec.fixed_link.append(pred.link_estimate[fx])
        rec.fixed_var.append(pred.link_variance[fx])
        rec.fixed_response.append(pred.response_estimate[fx])
        rec.fixed_response_var.append(pred.response_variance[fx])
        rec.covered.append(covered)
    return rec


def run_grid(cfg, out=None, progress=None):
    """Run every cell and replicate; optionally write the records CSV to ``out``.

    Returns the records sorted by grid coordinates.
    """
    X_test, f_test = evaluation_design(cfg)
    records = []
    for cell in cfg.cells():
        for rep in range(cfg.replicates):
            records.append(run_replicate(cfg, cell, rep, X_test, f_test))
            if progress is not None:
                progress(records[-1])
    records.sort(key=lambda r: r.key)
    if out is not None:
        write_records_csv(records, out)
    return records


_STAGE_FIELDS = ("mean_ll", "mse_link", "mse_response", "avg_var", "coverage", "abs_bias")


def record_columns():
    cols = ["family", "signal", "scale", "trials_max", "fraction", "replicate", "status"]
    for s in range(N_STAGES):
        cols += [f"s{s}_{name}" for name in _STAGE_FIELDS]
    for s in range(N_STAGES):
        for j in range(1, N_FIXED + 1):
            cols += [f"s{s}_p{j}_est", f"s{s}_p{j}_var"]
    return cols


def fmt(x):
    return format(float(x), ".17g")


def _record_row(rec):
    row = [rec.family, rec.signal, fmt(rec.scale), str(rec.trials_max), fmt(rec.fraction),
           str(rec.replicate), rec.status]
    if rec.status != "ok":
        return row + ["nan"] * (len(record_columns()) - len(row))
    for ev in rec.stages:
        row += [fmt(getattr(ev, name)) for name in _STAGE_FIELDS]
    for s in range(N_STAGES):
        for j in range(N_FIXED):
            row += [fmt(rec.fixed_link[s][j]), fmt(rec.fixed_var[s][j])]
    return row


def write_records_csv(records, out):
    """One row per (cell, replicate).  ``out`` is a path or a text stream."""
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            return write_records_csv(records, fh)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(record_columns())
    for rec in sorted(records, key=lambda r: r.key):
        w.writerow(_record_row(rec))


def summarize(records, cfg):
    """Per (cell, stage, fixed point) summaries across replicates.

    Returns a list of dicts with absolute bias, mean variance estimate,
    variance-consistency ratio, coverage, MSE and KS statistic, in link and
    response space.
    """
    fam = get_family(cfg.family)
    X_test, f_test = evaluation_design(cfg)
    fx = f_test[cfg.n_test_random:]
    rows = []
    groups = {}
    for rec in records:
        if rec.status == "ok":
            groups.setdefault((rec.scale, rec.trials_max, rec.fraction), []).append(rec)
    for (scale, m, frac), recs in sorted(groups.items()):
        truth = true_link(cfg.family, fx, scale)
        truth_resp = fam.inv_link(truth)
        for s in range(N_STAGES):
            est = np.array([r.fixed_link[s] for r in recs])
            var = np.array([r.fixed_var[s] for r in recs])
            rest = np.array([r.fixed_response[s] for r in recs])
            rvar = np.array([r.fixed_response_var[s] for r in recs])
            z = normal_interval(est, var, cfg.level)
            cov = ((z[0] <= truth) & (truth <= z[1])).mean(axis=0)
            for j in range(N_FIXED):
                row = dict(family=cfg.family, signal=cfg.signal, scale=scale, trials_max=m, fraction=frac,
                           stage=s, point=f"p{j + 1}", truth_link=truth[j], truth_response=truth_resp[j],
                           n_replicates=len(recs))
                row["abs_bias_link"] = abs(est[:, j].mean() - truth[j])
                row["abs_bias_response"] = abs(rest[:, j].mean() - truth_resp[j])
                row["avg_var_link"] = var[:, j].mean()
                row["avg_var_response"] = rvar[:, j].mean()
                row["mse_link"] = np.mean((est[:, j] - truth[j]) ** 2)
                row["mse_response"] = np.mean((rest[:, j] - truth_resp[j]) ** 2)
                row["coverage"] = cov[j]
                row["var_ratio_link"] = _safe(metrics.var_consistency_ratio, var[:, j], est[:, j])
                row["var_ratio_response"] = _safe(metrics.var_consistency_ratio, rvar[:, j], rest[:, j])
                row["ks_link"] = _safe(lambda *a: metrics.ks_normality(*a)[0], est[:, j], truth[j], var[:, j])
                row["ks_response"] = _safe(lambda *a: metrics.ks_normality(*a)[0],
                                           rest[:, j], truth_resp[j], rvar[:, j])
                rows.append(row)
    return rows


def point_coverage(records, cfg):
    """Coverage of every test point across replicates, per cell and stage."""
    _, f_test = evaluation_design(cfg)
    rows = []
    groups = {}
    for rec in records:
        if rec.status == "ok":
            groups.setdefault((rec.scale, rec.trials_max, rec.fraction), []).append(rec)
    for (scale, m, frac), recs in sorted(groups.items()):
        truth = true_link(cfg.family, f_test, scale)
        for s in range(N_STAGES):
            cov = np.mean([r.covered[s] for r in recs], axis=0)
            for i, (t, c) in enumerate(zip(truth, cov)):
                rows.append(dict(family=cfg.family, signal=cfg.signal, scale=scale, trials_max=m,
                                 fraction=frac, stage=s, point=i, truth_link=t, coverage=c))
    return rows


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return float("nan")


def write_dict_rows(rows, out):
    if not rows:
        return
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in (row[c] for c in cols)])


_LIST_KEYS = {"scales": float, "trials_max": int, "sample_fractions": float}


def load_config(path_or_text):
    """Parse a flat ``key = value`` file into a :class:`SimConfig`.

    Lists are comma-separated; ``#`` starts a comment.  ``preset = full``
    starts from the full-scale grid before applying the other keys.
    """
    if os.path.exists(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    else:
        text = str(path_or_text)
    raw = {}
    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    types = {f.name: f.type for f in fields(SimConfig)}
    unknown = set(raw) - set(types) - {"preset"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    family = raw.get("family", "poisson")
    base = SimConfig.full_scale(family) if raw.get("preset") == "full" else SimConfig(family=family)
    kw = {}
    for k, v in raw.items():
        if k == "preset":
            continue
        if k in _LIST_KEYS:
            kw[k] = tuple(_LIST_KEYS[k](s) for s in v.split(",") if s.strip())
        elif k in ("family", "signal", "variance_mode"):
            kw[k] = v
        elif k in ("level",):
            kw[k] = float(v)
        elif k == "mtry":
            kw[k] = None if v.lower() in ("", "none") else int(v)
        else:
            kw[k] = int(v)
    return replace(base, **kw)
