import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def reweighted_mle(family, y, trials, weights):
    """Closed-form constant MLE under observation weights (independent of the package)."""
    y = np.asarray(y, float)
    if family == "poisson":
        return np.log(np.sum(weights * y) / np.sum(weights))
    if family == "binomial":
        trials = np.asarray(trials, float)
        return np.log(np.sum(weights * y) / np.sum(weights * (trials - y)))
    if family == "gaussian":
        return np.sum(weights * y) / np.sum(weights)
    raise ValueError(family)


def fd_directional(family, y, trials, eps=1e-6):
    """Central differences of the reweighted MLE along P0 + eps (delta_i - P0)."""
    n = len(y)
    p0 = np.full(n, 1.0 / n)
    out = np.empty(n)
    for i in range(n):
        d = -p0.copy()
        d[i] += 1.0
        out[i] = (reweighted_mle(family, y, trials, p0 + eps * d)
                  - reweighted_mle(family, y, trials, p0 - eps * d)) / (2 * eps)
    return out


def two_pass_ij(N, T):
    """n * cov_b(N[b, i], T[b, j]) by explicit loops with the divisor B - 1."""
    B, n = N.shape
    m = T.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        nbar = sum(float(N[b, i]) for b in range(B)) / B
        for j in range(m):
            tbar = sum(float(T[b, j]) for b in range(B)) / B
            acc = 0.0
            for b in range(B):
                acc += (float(N[b, i]) - nbar) * (float(T[b, j]) - tbar)
            out[i, j] = n * acc / (B - 1)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
