import numpy as np
import pytest
from scipy.stats import norm
from sklearn.base import clone

from gbforest.family import get_family
from gbforest.forest import ForestParams, fit_forest
from gbforest.gbf import GeneralisedBoostedForest, combine_variance, normal_interval
from gbforest.tree import TreeParams

from conftest import two_pass_ij


def poisson_data(rng, n=200, p=4):
    X = rng.uniform(-1, 1, size=(n, p))
    y = rng.poisson(np.exp(0.5 + X[:, 0] + 0.5 * X[:, 1])).astype(float)
    return X, y


def binomial_data(rng, n=200, p=4, M=3):
    X = rng.uniform(-1, 1, size=(n, p))
    trials = rng.integers(1, M + 1, size=n).astype(float)
    y = rng.binomial(trials.astype(int), 1 / (1 + np.exp(-2 * X[:, 0]))).astype(float)
    return X, y, trials


def model(**kw):
    base = dict(n_estimators=60, random_state=3, min_node_size=5)
    base.update(kw)
    return GeneralisedBoostedForest(**base)


def test_stage_zero_is_the_constant(rng):
    X, y = poisson_data(rng)
    est = model(family="poisson", stages=0).fit(X, y)
    pred = est.predict_with_variance(rng.uniform(-1, 1, size=(7, 4)))
    np.testing.assert_array_equal(pred.link_estimate, np.full(7, np.log(y.mean())))
    U0 = (y - y.mean()) / y.mean()
    np.testing.assert_allclose(pred.link_variance, np.full(7, np.sum(U0**2) / len(y) ** 2), rtol=1e-12)


def test_gaussian_reduction_bit_for_bit(rng):
    X = rng.normal(size=(120, 3))
    y = X[:, 0] ** 2 + rng.normal(size=120)
    est = model(family="gaussian", stages=2, random_state=11).fit(X, y)
    params = ForestParams(60, 0.4, TreeParams(None, 5, None), seed=11)
    f1 = fit_forest(X, y - y.mean(), np.ones(120), params, stream=(0,))
    f2 = fit_forest(X, y - (y.mean() + f1.predict(X)), np.ones(120), params, stream=(1,))
    Xt = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(est.predict_link(Xt), (y.mean() + f1.predict(Xt)) + f2.predict(Xt))
    for a, b in zip(est.forests_, (f1, f2)):
        np.testing.assert_array_equal(a.inclusion, b.inclusion)


def test_training_likelihood_non_decreasing(rng):
    for seed in range(5):
        X, y = poisson_data(np.random.default_rng(seed), n=50)
        est = model(family="poisson", random_state=seed, n_estimators=100).fit(X, y)
        ll = est.train_log_lik_
        assert ll[0] <= ll[1] <= ll[2], ll


def test_constant_response_forests_are_degenerate(rng):
    X = rng.normal(size=(60, 3))
    y = np.full(60, 3.0)
    est = model(family="poisson").fit(X, y)
    staged = est.staged_predict_with_variance(X[:5])
    for pred in staged:
        np.testing.assert_array_equal(pred.link_variance, staged[0].link_variance)
        # exp(log 3) is not exactly 3, so residuals are zero only up to rounding
        np.testing.assert_allclose(pred.link_estimate, np.full(5, np.log(3.0)), rtol=0, atol=1e-14)


def raw_variance_oracle(est, Xt, y, trials=None):
    fam = est.family_
    n = len(y)
    if fam.name == "poisson":
        U = np.repeat(((y - y.mean()) / y.mean())[:, None], len(Xt), axis=1)
    else:
        nbar, ybar = trials.mean(), y.mean()
        U = np.repeat(((nbar * y - trials * ybar) / (ybar * (nbar - ybar)))[:, None], len(Xt), axis=1)
    mc = np.zeros(len(Xt))
    for forest in est.forests_:
        T = forest.per_tree_predictions(Xt)
        U = U + two_pass_ij(forest.inclusion, T)
        B = T.shape[0]
        mc += np.array([np.sum((T[:, j] - T[:, j].mean()) ** 2) / (B - 1) for j in range(len(Xt))]) / B
    return np.sum(U**2, axis=0) / n**2 + mc


def test_raw_variance_matches_expansion(rng):
    X, y = poisson_data(rng, n=40)
    est = model(family="poisson", variance_mode="raw", n_estimators=80).fit(X, y)
    Xt = rng.uniform(-1, 1, size=(5, 4))
    np.testing.assert_allclose(est.predict_with_variance(Xt).link_variance,
                               raw_variance_oracle(est, Xt, y), rtol=1e-10, atol=1e-15)
    X, y, trials = binomial_data(rng, n=40)
    est = model(family="binomial", variance_mode="raw", n_estimators=80).fit(X, y, trials)
    np.testing.assert_allclose(est.predict_with_variance(Xt).link_variance,
                               raw_variance_oracle(est, Xt, y, trials), rtol=1e-10, atol=1e-15)


def test_corrected_not_above_raw(rng):
    X, y = poisson_data(rng)
    Xt = rng.uniform(-1, 1, size=(50, 4))
    raw = model(family="poisson", variance_mode="raw").fit(X, y).predict_with_variance(Xt)
    cor = model(family="poisson").fit(X, y).predict_with_variance(Xt)
    assert np.all(cor.link_variance <= raw.link_variance)
    assert np.all(cor.link_variance >= 0) and np.all(raw.link_variance >= 0)
    np.testing.assert_array_equal(cor.link_estimate, raw.link_estimate)


def test_combine_variance_clamps():
    U0 = np.zeros(4)
    v, nc = combine_variance(U0, [np.zeros((4, 2))], [np.array([1.0, 0.0])], 4, 10, 2, "corrected")
    assert nc == 1 and v[0] == 0.0
    v, nc = combine_variance(U0, [np.zeros((4, 2))], [np.array([1.0, 0.0])], 4, 10, 2, "raw")
    assert nc == 0 and v[0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        combine_variance(U0, [], [], 4, 10, 2, "other")


def test_response_variance_delta_method(rng):
    X, y, trials = binomial_data(rng)
    pred = model(family="binomial").fit(X, y, trials).predict_with_variance(X[:10])
    p = 1 / (1 + np.exp(-pred.link_estimate))
    np.testing.assert_allclose(pred.response_estimate, p, rtol=1e-12)
    np.testing.assert_allclose(pred.response_variance, pred.link_variance * (p * (1 - p)) ** 2, rtol=1e-12)


def test_normal_interval_examples():
    lo, hi = normal_interval(0.0, 1.0, 0.95)
    assert lo == pytest.approx(-1.959964, abs=1e-6) and hi == pytest.approx(1.959964, abs=1e-6)
    lo, hi = normal_interval(2.0, 3.0, 0.0)
    assert lo == hi == 2.0
    lo1, hi1 = normal_interval(0.0, 1.0, 0.9)
    lo4, hi4 = normal_interval(0.0, 4.0, 0.9)
    assert hi4 - lo4 == pytest.approx(2 * (hi1 - lo1), rel=1e-15)


def test_confidence_interval_delegates(rng):
    X, y = poisson_data(rng)
    est = model(family="poisson").fit(X, y)
    pred = est.predict_with_variance(X[:8])
    lo, hi = est.confidence_interval(X[:8], 0.9)
    z = norm.ppf(0.95)
    np.testing.assert_allclose(hi - pred.link_estimate, z * np.sqrt(pred.link_variance), rtol=1e-12)
    np.testing.assert_allclose(pred.link_estimate - lo, z * np.sqrt(pred.link_variance), rtol=1e-12)
    with pytest.raises(ValueError):
        est.confidence_interval(X[:2], 1.0)


def test_prediction_range_examples(rng):
    X, y = poisson_data(rng)
    est = model(family="poisson").fit(X, y)
    lo, hi = est.prediction_range()
    assert lo == est.eta0_ - 2 and hi == np.inf
    Xb = rng.normal(size=(40, 2))
    yb = np.tile([0.0, 1.0], 20)
    est = model(family="binomial", stages=1).fit(Xb, yb)
    assert est.eta0_ == 0.0
    assert est.prediction_range() == (-2.0, 2.0)
    assert est.prediction_range(0) == (0.0, 0.0)
    g = model(family="gaussian").fit(X, y)
    assert g.prediction_range() == (-np.inf, np.inf)


@pytest.mark.parametrize("fam", ["poisson", "binomial"])
def test_predictions_inside_range(fam, rng):
    if fam == "poisson":
        X, y = poisson_data(rng)
        trials = None
    else:
        X, y, trials = binomial_data(rng)
    est = model(family=fam, min_node_size=1, sample_fraction=0.2).fit(X, y, trials)
    Xt = np.vstack([rng.uniform(-3, 3, size=(300, 4)), X])
    for s, pred in enumerate(est.staged_predict_with_variance(Xt)):
        lo, hi = est.prediction_range(s)
        assert np.all(pred.link_estimate >= lo) and np.all(pred.link_estimate <= hi)


def test_zero_second_stage_residuals_reduce_to_one_stage():
    X = np.arange(20.0)[:, None]
    y = np.where(X[:, 0] < 10, 0.0, 4.0)
    kw = dict(family="gaussian", sample_fraction=1.0, min_node_size=1, mtry=1, n_estimators=10)
    one = model(stages=1, **kw).fit(X, y)
    two = model(stages=2, **kw).fit(X, y)
    Xt = np.linspace(-5, 25, 31)[:, None]
    p1, p2 = one.predict_with_variance(Xt), two.predict_with_variance(Xt)
    np.testing.assert_array_equal(p2.link_estimate, p1.link_estimate)
    np.testing.assert_array_equal(p2.link_variance, p1.link_variance)
    np.testing.assert_array_equal(two.forests_[1].per_tree_predictions(Xt), 0.0)


def test_out_of_bag_residual_source(rng):
    X, y = poisson_data(rng)
    a = model(family="poisson").fit(X, y)
    b = model(family="poisson", residual_source="out_of_bag").fit(X, y)
    np.testing.assert_array_equal(a.forests_[0].inclusion, b.forests_[0].inclusion)
    assert not np.array_equal(a.stage_train_link_[1], b.stage_train_link_[1])


def test_estimator_api(rng):
    est = GeneralisedBoostedForest(family="binomial", n_estimators=30)
    assert clone(est).get_params() == est.get_params()
    X, y, trials = binomial_data(rng)
    est.set_params(stages=1).fit(X, y, trials)
    assert len(est.forests_) == 1 and est.n_features_in_ == 4
    assert est.predict(X[:3]).shape == (3,)
    with pytest.raises(ValueError, match="features"):
        est.predict(X[:3, :2])
    with pytest.raises(ValueError, match="unsupported stage count"):
        GeneralisedBoostedForest(stages=3).fit(X, y)
    with pytest.raises(ValueError):
        GeneralisedBoostedForest(variance_mode="bias").fit(X, y)
    with pytest.raises(ValueError):
        GeneralisedBoostedForest(residual_source="x").fit(X, y)
    with pytest.raises(ValueError, match="degenerate"):
        GeneralisedBoostedForest(family="poisson").fit(X, np.zeros(len(X)))


def test_bernoulli_default_trials(rng):
    X = rng.normal(size=(100, 3))
    y = (X[:, 0] > 0).astype(float)
    a = model(family="binomial").fit(X, y)
    b = model(family="binomial").fit(X, y, np.ones(100))
    np.testing.assert_array_equal(a.predict_link(X), b.predict_link(X))


def test_deterministic_and_chunk_independent(rng):
    X, y = poisson_data(rng, n=150)
    Xt = rng.uniform(-1, 1, size=(600, 4))
    a = model(family="poisson").fit(X, y).predict_with_variance(Xt)
    b = model(family="poisson").fit(X, y)
    whole = b.predict_with_variance(Xt)
    parts = np.concatenate([b.predict_with_variance(Xt[i:i + 7]).link_variance for i in range(0, 600, 7)])
    np.testing.assert_array_equal(a.link_estimate, whole.link_estimate)
    np.testing.assert_array_equal(parts, whole.link_variance)
    assert a.stage_contributions.shape == (3, 600)


def test_family_instance_accepted(rng):
    X, y = poisson_data(rng)
    est = model(family=get_family("poisson")).fit(X, y)
    assert est.family_.name == "poisson"
