"""K-fold evaluation of generalised boosted forests on tabular data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.base import clone

from .family import DegenerateMLEError, get_family
from .gbf import GeneralisedBoostedForest

__all__ = ["Schema", "Dataset", "CvReport", "load_schema", "load_csv", "load_points", "kfold_assign", "cv_evaluate"]

class SchemaError(ValueError):
    pass


@dataclass
class Schema:
    """Which CSV columns are the response, trial counts and features.

    ``features=None`` uses every other column.  Columns listed in
    ``categorical``, and any non-numeric feature column, are one-hot encoded
    with one indicator per category in sorted order.
    """

    response: str
    trials: str | None = None
    features: list | None = None
    categorical: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"response", "trials", "features", "categorical"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "response" not in d:
            raise SchemaError("schema needs a 'response' column")
        return cls(d["response"], d.get("trials"), d.get("features"), list(d.get("categorical") or []))


def load_schema(path):
    with open(path) as fh:
        return Schema.from_dict(json.load(fh))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    trials: np.ndarray | None
    name: str = ""
    feature_names: list = field(default_factory=list)

    @property
    def n(self):
        return self.X.shape[0]


def load_csv(path, schema, name=None):
    """Read a CSV into a :class:`Dataset`."""
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    df = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    needed = [schema.response] + ([schema.trials] if schema.trials else []) + list(schema.features or [])
    missing_cols = [c for c in needed + schema.categorical if c not in df.columns]
    if missing_cols:
        raise SchemaError(f"columns not found in {path}: {missing_cols}")
    features = list(schema.features) if schema.features is not None else [
        c for c in df.columns if c not in (schema.response, schema.trials)]
    if not features:
        raise SchemaError("no feature columns")
    used = df[[schema.response] + ([schema.trials] if schema.trials else []) + features]
    bad_rows = np.flatnonzero(used.isna().any(axis=1).to_numpy())
    if bad_rows.size:
        raise ValueError(f"missing values in rows {bad_rows[:20].tolist()}"
                         + (" ..." if bad_rows.size > 20 else ""))
    y = pd.to_numeric(df[schema.response], errors="coerce")
    if y.isna().any():
        raise ValueError(f"non-numeric response in column {schema.response!r}")
    trials = None
    if schema.trials:
        t = pd.to_numeric(df[schema.trials], errors="coerce")
        if t.isna().any():
            raise ValueError(f"non-numeric trial counts in column {schema.trials!r}")
        trials = t.to_numpy(dtype=np.float64)

    blocks, names = [], []
    for col in features:
        s = df[col]
        if col in schema.categorical or not pd.api.types.is_numeric_dtype(s):
            cats = sorted(s.astype(str).unique())
            for c in cats:
                blocks.append((s.astype(str) == c).to_numpy(dtype=np.float64))
                names.append(f"{col}={c}")
        else:
            blocks.append(s.to_numpy(dtype=np.float64))
            names.append(col)
    X = np.column_stack(blocks)
    return Dataset(X, y.to_numpy(dtype=np.float64), trials, name or str(path), names)


def load_points(path, feature_names):
    """Design matrix for new points, laid out like a training :class:`Dataset`.

    ``feature_names`` are the training column names; ``"col=cat"`` entries
    become indicators of ``col == cat``.  Extra columns are ignored.
    """
    df = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    cols = []
    for name in feature_names:
        if name in df.columns:
            s = pd.to_numeric(df[name], errors="coerce")
            if s.isna().any():
                raise ValueError(f"missing or non-numeric values in column {name!r}, rows "
                                 f"{np.flatnonzero(s.isna().to_numpy())[:20].tolist()}")
            cols.append(s.to_numpy(dtype=np.float64))
        elif "=" in name and name.split("=", 1)[0] in df.columns:
            col, cat = name.split("=", 1)
            cols.append((df[col].astype(str) == cat).to_numpy(dtype=np.float64))
        else:
            raise SchemaError(f"column {name!r} not found in {path}")
    return np.column_stack(cols) if cols else np.zeros((len(df), 0))


def kfold_assign(n, k=10, seed=0):
    """Balanced random fold labels in ``0..k-1``; fold sizes differ by at most one."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) & (2**64 - 1))))
    labels = np.empty(n, dtype=np.int64)
    labels[rng.permutation(n)] = np.arange(n) % k
    return labels


@dataclass
class CvReport:
    """Per-stage cross-validated statistics.

    ``avg_var`` uses the delta-method response variance
    ``V * ((g^-1)'(f))^2``; ``avg_var_printed`` uses ``V * (g^-1(f))^2``.
    """

    name: str
    family: str
    rows: list
    link: np.ndarray | None = None  # (stages + 1, n) out-of-fold link estimates
    link_variance: np.ndarray | None = None
    folds: np.ndarray | None = None

    columns = ("stage", "mse", "avg_var", "avg_var_printed", "pc", "ll")

    def to_csv(self, out):
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([row["stage"]] + [format(row[c], ".17g") for c in self.columns[1:]])

    def to_text(self):
        head = f"{self.name:<10}{'MSE':>10}{'Avg Var':>12}{'Avg Var*':>12}{'PC':>9}{'LL':>11}"
        lines = [head]
        for row in self.rows:
            lines.append(f"{'stage' + str(row['stage']):<10}{row['mse']:>10.3f}{row['avg_var']:>12.5f}"
                         f"{row['avg_var_printed']:>12.5f}{row['pc']:>9.4f}{row['ll']:>11.4f}")
        return "\n".join(lines)


def cv_evaluate(dataset, family, estimator=None, seed=0, k=10, level=0.95):
    """Out-of-fold predictions at each stage and the summary statistics.

    Parameters
    ----------
    dataset : Dataset
    family : str or Family
    estimator : GeneralisedBoostedForest, optional
        Template whose parameters are used in every fold (``family`` and
        ``stages=2`` are imposed).
    seed : int
        Seeds the fold assignment.

    Returns
    -------
    CvReport
    """
    fam = get_family(family)
    template = estimator if estimator is not None else GeneralisedBoostedForest()
    template = clone(template).set_params(family=fam.name, stages=2)
    X, y, trials = dataset.X, dataset.y, dataset.trials
    if fam.name == "binomial" and trials is None:
        trials = np.ones_like(y)
    fam.validate(y, trials)
    n = dataset.n
    labels = kfold_assign(n, k, seed)
    n_stages = 3
    link = np.full((n_stages, n), np.nan)
    var = np.full((n_stages, n), np.nan)

    for j in range(k):
        test = labels == j
        train = ~test
        try:
            model = clone(template).fit(X[train], y[train], None if trials is None else trials[train])
        except DegenerateMLEError:
            # holding out more folds only shrinks the training set, so no merge can help
            raise DegenerateMLEError(
                f"degenerate MLE at infinity when fold {j} is held out: the remaining training "
                "responses are all at the boundary of the family's support") from None
        staged = model.staged_predict_with_variance(X[test])
        for s, pred in enumerate(staged):
            link[s, test] = pred.link_estimate
            var[s, test] = pred.link_variance

    target = y if trials is None or fam.name != "binomial" else y / trials
    z = norm.ppf(0.5 + level / 2.0)
    rows = []
    for s in range(n_stages):
        mu = fam.inv_link(link[s])
        v_resp = var[s] * fam.inv_link_deriv(link[s]) ** 2
        mse = float(np.mean((target - mu) ** 2))
        half = z * np.sqrt(v_resp + mse)
        rows.append(dict(
            stage=s,
            mse=mse,
            avg_var=float(np.mean(v_resp)),
            avg_var_printed=float(np.mean(var[s] * mu**2)),
            pc=float(np.mean((mu - half <= target) & (target <= mu + half))),
            ll=float(np.mean(fam.log_lik(link[s], y, trials))),
        ))
    return CvReport(dataset.name, fam.name, rows, link, var, labels)
