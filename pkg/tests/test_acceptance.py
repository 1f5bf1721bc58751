"""Acceptance criteria 1-9.

Each test records ``(passed, detail)`` in ``RESULTS``; ``conftest.py``
prints one line per criterion at the end of the run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from gbforest import cli, sim
from gbforest import io as model_io
from gbforest.evaluation import Schema, cv_evaluate, load_csv
from gbforest.family import mle_derivatives, newton_residuals_weights
from gbforest.forest import ForestParams, fit_forest
from gbforest.gbf import GeneralisedBoostedForest
from gbforest.tree import TreeParams

from conftest import fd_directional, two_pass_ij

DATA = Path(__file__).resolve().parent.parent / "data"
RESULTS = {}


def record(number, passed, detail):
    RESULTS[number] = (bool(passed), detail)
    assert passed, detail


def test_criterion_1_ij_matches_two_pass_oracle():
    worst = 0.0
    count = 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(12, 41))
        B = int(rng.integers(20, 201))
        X = rng.normal(size=(n, 3))
        r = X[:, 0] + rng.normal(size=n)
        w = rng.uniform(0.2, 3.0, size=n) if seed % 2 else np.ones(n)
        params = ForestParams(B, float(rng.choice([0.3, 0.5, 0.8])), TreeParams(min_node_size=2), seed=seed)
        forest = fit_forest(X, r, w, params)
        Xt = rng.normal(size=(6, 3))
        T = forest.per_tree_predictions(Xt)
        worst = max(worst, np.max(np.abs(forest.ij_derivatives(Xt) - two_pass_ij(forest.inclusion, T))))
        count += 1
    # the forests inside a boosted fit too
    rng = np.random.default_rng(99)
    X = rng.uniform(-1, 1, size=(40, 4))
    y = rng.poisson(np.exp(X[:, 0])).astype(float)
    est = GeneralisedBoostedForest(n_estimators=200, min_node_size=2, random_state=1).fit(X, y)
    Xt = rng.uniform(-1, 1, size=(5, 4))
    for forest in est.forests_:
        T = forest.per_tree_predictions(Xt)
        worst = max(worst, np.max(np.abs(forest.ij_derivatives(Xt) - two_pass_ij(forest.inclusion, T))))
        count += 1
    record(1, worst <= 1e-12, f"{count} forests, max |IJ - oracle| = {worst:.2e} (tol 1e-12)")


def test_criterion_2_mle_derivatives_match_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    done = 0
    while done < 50:
        fam = "poisson" if done % 2 == 0 else "binomial"
        if fam == "poisson":
            y = rng.poisson(rng.uniform(0.5, 5), size=30).astype(float)
            trials = None
        else:
            trials = rng.integers(1, 6, size=30).astype(float)
            y = rng.binomial(trials.astype(int), rng.uniform(0.1, 0.9)).astype(float)
        try:
            U = mle_derivatives(fam, y, trials)
        except ValueError:
            continue  # degenerate draw; not a dataset with a finite MLE
        worst = max(worst, np.max(np.abs(U - fd_directional(fam, y, trials, eps=1e-6))))
        done += 1
    record(2, worst <= 1e-5, f"50 datasets, max |U - FD| = {worst:.2e} (tol 1e-5)")


def test_criterion_3_gaussian_reduction():
    rng = np.random.default_rng(3)
    eta = rng.normal(size=200)
    y = rng.normal(size=200) * 3
    r, w = newton_residuals_weights("gaussian", eta, y)
    exact_resid = np.array_equal(r, y - eta) and np.array_equal(w, np.ones(200))
    X = rng.normal(size=(200, 5))
    yy = np.sin(2 * X[:, 0]) + X[:, 1] + rng.normal(size=200)
    est = GeneralisedBoostedForest(family="gaussian", n_estimators=100, random_state=17).fit(X, yy)
    params = ForestParams(100, 0.4, TreeParams(None, 5, None), seed=17)
    f1 = fit_forest(X, yy - yy.mean(), np.ones(200), params, stream=(0,))
    f2 = fit_forest(X, yy - (yy.mean() + f1.predict(X)), np.ones(200), params, stream=(1,))
    Xt = rng.normal(size=(100, 5))
    same = np.array_equal(est.predict_link(Xt), (yy.mean() + f1.predict(Xt)) + f2.predict(Xt))
    record(3, exact_resid and same, f"residuals/weights exact: {exact_resid}; two-stage fit bit-for-bit: {same}")


def test_criterion_4_truncation_bounds():
    violations = {"poisson": 0, "binomial": 0}
    checked = 0
    for seed in range(20):
        for fam in ("poisson", "binomial"):
            cfg = sim.SimConfig(family=fam, seed=seed)
            rng = np.random.default_rng(seed)
            X = sim.gen_covariates(500, 15, rng)
            y, trials = sim.gen_response(fam, sim.signal_linear(X), 4.0, 4, rng)
            est = GeneralisedBoostedForest(family=fam, n_estimators=100, random_state=seed).fit(X, y, trials)
            Xt = np.vstack([X, sim.gen_covariates(500, 15, rng) * 1.5, sim.fixed_points(cfg.dim)])
            for s, pred in enumerate(est.staged_predict_with_variance(Xt)):
                if fam == "poisson":
                    lo, hi = est.eta0_ - s, np.inf
                else:
                    lo, hi = est.prediction_range(s)
                violations[fam] += int(np.sum((pred.link_estimate < lo) | (pred.link_estimate > hi)))
                checked += len(Xt)
    total = sum(violations.values())
    record(4, total == 0, f"{checked} staged predictions over 40 fits, violations {violations}")


def _desk_grid(family):
    cfg = sim.SimConfig(family=family, n_train=500, n_test_random=100, replicates=20, scales=(4.0,),
                        trials_max=(4,), sample_fractions=(0.4,), n_trees=300, seed=5)
    return sim.run_grid(cfg)


def test_criterion_5_stagewise_likelihood_improves():
    details, ok = [], True
    for fam in ("binomial", "poisson"):
        recs = [r for r in _desk_grid(fam) if r.status == "ok"]
        up = [r.stages[0].mean_ll < r.stages[1].mean_ll < r.stages[2].mean_ll for r in recs]
        frac = float(np.mean(up)) if recs else 0.0
        ok &= frac >= 0.9 and len(recs) == 20
        details.append(f"{fam} {sum(up)}/{len(recs)}")
    record(5, ok, "replicates with LL0 < LL1 < LL2: " + ", ".join(details) + " (need >= 90%)")


@pytest.fixture(scope="module")
def poisson_p1_grid():
    cfg = sim.SimConfig(family="poisson", n_train=300, n_test_random=100, replicates=100, scales=(1.0,),
                        sample_fractions=(0.4,), n_trees=500, seed=6)
    recs = sim.run_grid(cfg)
    rows = sim.summarize(recs, cfg)
    return {(r["stage"], r["point"]): r for r in rows}, sum(r.status != "ok" for r in recs)


def test_criterion_6_variance_behaviour(poisson_p1_grid):
    rows, failed = poisson_p1_grid
    row = rows[(2, "p1")]
    ratio, cov = row["var_ratio_link"], row["coverage"]
    ok = 0.5 <= ratio <= 5 and cov >= 0.80 and failed == 0
    others = "; ".join(f"stage{s}: ratio {rows[(s, 'p1')]['var_ratio_link']:.2f}, "
                       f"coverage {rows[(s, 'p1')]['coverage']:.2f}" for s in (0, 1))
    record(6, ok, f"p1 stage2: ratio {ratio:.3f} (need [0.5, 5]), coverage {cov:.2f} (need >= 0.80); {others}")


def test_criterion_7_real_data_direction():
    t0 = time.time()
    est = GeneralisedBoostedForest(n_estimators=300, sample_fraction=0.4, random_state=0)
    spam = load_csv(DATA / "spambase.csv", Schema("spam"), name="spam")
    rs = cv_evaluate(spam, "binomial", est, seed=0, k=10)
    ll = [row["ll"] for row in rs.rows]
    spam_ok = ll[0] < ll[1] < ll[2] and rs.rows[2]["mse"] <= 0.08
    abalone = load_csv(DATA / "abalone.csv", Schema("rings", categorical=["sex"]), name="abalone")
    ra = cv_evaluate(abalone, "poisson", est, seed=0, k=10)
    mse = [row["mse"] for row in ra.rows]
    abalone_ok = mse[1] < mse[0] and mse[2] < mse[0]
    detail = (f"spam LL {ll[0]:.4f} -> {ll[1]:.4f} -> {ll[2]:.4f}, stage2 MSE {rs.rows[2]['mse']:.4f} "
              f"(need <= 0.08); abalone MSE {mse[0]:.3f} -> {mse[1]:.3f} -> {mse[2]:.3f} "
              f"[{time.time() - t0:.0f}s]")
    print(rs.to_text())
    print(ra.to_text())
    record(7, spam_ok and abalone_ok, detail)


def test_criterion_8_ks_at_p1(poisson_p1_grid):
    rows, _ = poisson_p1_grid
    ks = rows[(2, "p1")]["ks_link"]
    others = ", ".join(f"stage{s} {rows[(s, 'p1')]['ks_link']:.3f}" for s in (0, 1))
    record(8, ks <= 0.35, f"link-space KS at p1, stage2 {ks:.3f} (need <= 0.35); {others}")


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("family = binomial\nscales = 1, 4\ntrials_max = 1, 4\nreplicates = 2\n"
                   "n_train = 100\nn_test_random = 20\nn_trees = 30\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.main(["simulate", "--config", str(cfg), "--out", str(a), "--seed", "11"])
    cli.main(["simulate", "--config", str(cfg), "--out", str(b), "--seed", "11"])
    csv_same = a.read_bytes() == b.read_bytes() and len(a.read_bytes()) > 0

    rng = np.random.default_rng(9)
    X = rng.uniform(-1, 1, size=(300, 6))
    trials = rng.integers(1, 5, size=300).astype(float)
    y = rng.binomial(trials.astype(int), 1 / (1 + np.exp(-3 * X[:, 0]))).astype(float)
    est = GeneralisedBoostedForest(family="binomial", n_estimators=100, random_state=2).fit(X, y, trials)
    path = tmp_path / "m.gbf"
    model_io.save_model(est, path)
    back = model_io.load_model(path)
    Xt = rng.uniform(-1.5, 1.5, size=(200, 6))
    round_trip = all(
        np.array_equal(getattr(p, f), getattr(q, f))
        for p, q in zip(est.staged_predict_with_variance(Xt), back.staged_predict_with_variance(Xt))
        for f in ("link_estimate", "link_variance", "response_estimate", "response_variance"))
    record(9, csv_same and round_trip, f"simulate CSV byte-identical: {csv_same}; model file round-trip exact: {round_trip}")
