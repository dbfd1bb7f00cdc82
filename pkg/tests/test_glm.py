"""Weighted GLM solvers against explicit expansion, scipy, and closed forms.

The solvers work on implicit (row, state) cells; ``expand()`` gives the
literal row-expanded problem, which slower reference routes can solve.
"""


import numpy as np
import pytest
from scipy import optimize
from scipy.special import logit as sp_logit

from lmdrop.exceptions import RankError, SeparationError
from lmdrop.glm import (
    StateWeightedGlm,
    binary_eta_derivatives,
    binary_weighted_loglik,
    build_hazard_problem,
    fit_weighted_bernoulli,
    fit_weighted_gaussian,
    fit_weighted_hazard,
    gaussian_weighted_loglik,
)

from conftest import make_spec, random_dataset


def _gaussian_problem(rng, rows=40, k=3, p=2, zero_rows=0):
    x = rng.normal(size=(rows, p))
    y = rng.normal(size=rows) + x @ np.array([1.0, -0.5][:p])
    w = rng.uniform(0.05, 1.0, size=(rows, k))
    if zero_rows:
        w[:zero_rows] = 0.0
    return StateWeightedGlm(covariates=x, response=y, weights=w, family="gaussian", link="identity")


def _wls_reference(problem):
    """Weighted least squares on the explicit expansion."""
    x, y, w = problem.expand()
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    resid = y - x @ coef
    sigma2 = float((w * resid**2).sum() / w.sum())
    return coef, sigma2


def test_gaussian_matches_expanded_wls(rng):
    problem = _gaussian_problem(rng)
    fit = fit_weighted_gaussian(problem)
    coef_ref, sigma2_ref = _wls_reference(problem)
    got = np.concatenate([fit.intercepts, fit.slopes])
    assert np.allclose(got, coef_ref, atol=1e-10)
    assert fit.sigma2 == pytest.approx(sigma2_ref, abs=1e-10)


def test_gaussian_zero_weight_rows_ignored(rng):
    problem = _gaussian_problem(rng, rows=50, zero_rows=10)
    trimmed = StateWeightedGlm(
        covariates=problem.covariates[10:],
        response=problem.response[10:],
        weights=problem.weights[10:],
        family="gaussian",
        link="identity",
    )
    a = fit_weighted_gaussian(problem)
    b = fit_weighted_gaussian(trimmed)
    assert np.allclose(a.intercepts, b.intercepts, atol=1e-10)
    assert np.allclose(a.slopes, b.slopes, atol=1e-10)
    assert a.sigma2 == pytest.approx(b.sigma2, abs=1e-10)


def test_gaussian_row_split_invariance(rng):
    # splitting every row into two half-weight copies changes nothing
    problem = _gaussian_problem(rng, rows=30)
    doubled = StateWeightedGlm(
        covariates=np.vstack([problem.covariates, problem.covariates]),
        response=np.concatenate([problem.response, problem.response]),
        weights=np.vstack([problem.weights / 2.0, problem.weights / 2.0]),
        family="gaussian",
        link="identity",
    )
    a = fit_weighted_gaussian(problem)
    b = fit_weighted_gaussian(doubled)
    assert np.allclose(a.intercepts, b.intercepts, atol=1e-10)
    assert np.allclose(a.slopes, b.slopes, atol=1e-10)
    assert a.sigma2 == pytest.approx(b.sigma2, abs=1e-10)


def test_gaussian_loglik_maximised_at_fit(rng):
    problem = _gaussian_problem(rng, rows=25, k=2, p=2)
    fit = fit_weighted_gaussian(problem)
    best = gaussian_weighted_loglik(problem, fit.intercepts, fit.slopes, fit.sigma2)
    for _ in range(20):
        di = rng.normal(0.0, 0.05, size=2)
        ds = rng.normal(0.0, 0.05, size=2)
        other = gaussian_weighted_loglik(
            problem, fit.intercepts + di, fit.slopes + ds, fit.sigma2 * 1.02
        )
        assert other <= best + 1e-10


def test_gaussian_rank_error_names_columns(rng):
    x = rng.normal(size=(20, 2))
    x[:, 1] = 2.0 * x[:, 0]  # collinear pair
    problem = StateWeightedGlm(
        covariates=x,
        response=rng.normal(size=20),
        weights=np.ones((20, 1)),
        family="gaussian",
        link="identity",
        labels=("intercept[1]", "a", "b"),
    )
    with pytest.raises(RankError) as err:
        fit_weighted_gaussian(problem)
    assert any(name in ("a", "b") for name in err.value.columns)


def test_gaussian_unweighted_state_collapse(rng):
    # a state with zero weight everywhere makes its intercept unidentifiable
    x = rng.normal(size=(20, 1))
    w = np.ones((20, 2))
    w[:, 1] = 0.0
    problem = StateWeightedGlm(
        covariates=x, response=rng.normal(size=20), weights=w,
        family="gaussian", link="identity",
    )
    with pytest.raises(RankError) as err:
        fit_weighted_gaussian(problem)
    assert "intercept[2]" in err.value.columns


# -- bernoulli ----------------------------------------------------------------


def _bernoulli_problem(rng, rows=200, k=2, p=1, link="logit"):
    x = rng.normal(size=(rows, p))
    eta = 0.4 * x[:, 0] - 0.2
    prob = 1.0 / (1.0 + np.exp(-eta))
    y = (rng.uniform(size=rows) < prob).astype(float)
    w = rng.uniform(0.05, 1.0, size=(rows, k))
    return StateWeightedGlm(covariates=x, response=y, weights=w, family="bernoulli", link=link)


def test_bernoulli_intercept_only_closed_form():
    # constant model: invlink(intercept) equals the weighted success rate
    y = np.array([1.0, 0.0, 0.0, 0.0])
    problem = StateWeightedGlm(
        covariates=np.zeros((4, 0)),
        response=y,
        weights=np.ones((4, 1)),
        family="bernoulli",
        link="logit",
    )
    fit = fit_weighted_bernoulli(problem)
    assert fit.intercepts[0] == pytest.approx(sp_logit(0.25), abs=1e-9)
    assert fit.intercepts[0] == pytest.approx(-1.0986122886681098, abs=1e-7)


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_bernoulli_matches_scipy_optimizer(rng, link):
    problem = _bernoulli_problem(rng, link=link)
    fit = fit_weighted_bernoulli(problem)
    coef0 = np.zeros(problem.n_states + problem.n_covariates)
    res = optimize.minimize(
        lambda c: -binary_weighted_loglik(problem, c),
        coef0,
        method="BFGS",
        options={"gtol": 1e-10, "maxiter": 500},
    )
    got = np.concatenate([fit.intercepts, fit.slopes])
    assert np.allclose(got, res.x, atol=5e-6)
    assert binary_weighted_loglik(problem, got) >= binary_weighted_loglik(
        problem, res.x
    ) - 1e-8


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_bernoulli_score_vanishes_at_fit(rng, link):
    problem = _bernoulli_problem(rng, link=link)
    fit = fit_weighted_bernoulli(problem)
    coef = np.concatenate([fit.intercepts, fit.slopes])
    eps = 1e-6
    for j in range(coef.shape[0]):
        up = coef.copy()
        dn = coef.copy()
        up[j] += eps
        dn[j] -= eps
        grad = (
            binary_weighted_loglik(problem, up) - binary_weighted_loglik(problem, dn)
        ) / (2 * eps)
        assert abs(grad) < 1e-6


def test_bernoulli_row_split_invariance(rng):
    problem = _bernoulli_problem(rng, rows=120)
    doubled = StateWeightedGlm(
        covariates=np.vstack([problem.covariates, problem.covariates]),
        response=np.concatenate([problem.response, problem.response]),
        weights=np.vstack([problem.weights * 0.5, problem.weights * 0.5]),
        family="bernoulli",
        link="logit",
    )
    a = fit_weighted_bernoulli(problem)
    b = fit_weighted_bernoulli(doubled)
    assert np.allclose(a.intercepts, b.intercepts, atol=1e-8)
    assert np.allclose(a.slopes, b.slopes, atol=1e-8)


def test_bernoulli_separation_detected(rng):
    # response perfectly predicted by the sign of x: no finite MLE, the
    # slope diverges
    x = np.linspace(-0.2, 0.2, 40).reshape(-1, 1)
    y = (x[:, 0] > 0).astype(float)
    problem = StateWeightedGlm(
        covariates=x, response=y, weights=np.ones((40, 1)),
        family="bernoulli", link="logit",
    )
    with pytest.raises(SeparationError):
        fit_weighted_bernoulli(problem)


def test_bernoulli_all_zero_response_detected():
    y = np.zeros(30)
    problem = StateWeightedGlm(
        covariates=np.zeros((30, 0)), response=y, weights=np.ones((30, 1)),
        family="bernoulli", link="logit",
    )
    with pytest.raises(SeparationError):
        fit_weighted_bernoulli(problem)


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_binary_eta_derivatives_match_finite_differences(link):
    eta = np.linspace(-3.0, 2.5, 23)
    for y in (0.0, 1.0):
        yv = np.full_like(eta, y)
        first, minus_second = binary_eta_derivatives(eta, yv, link)

        def pointwise(e):
            from lmdrop.model import hazard_logterms

            lp, l1mp = hazard_logterms(np.asarray(e), link)
            return np.where(yv > 0, lp, l1mp)

        eps = 1e-6
        fd_first = (pointwise(eta + eps) - pointwise(eta - eps)) / (2 * eps)
        # wider step for the second difference: eps**2 amplifies roundoff
        eps2 = 1e-4
        fd_second = (
            pointwise(eta + eps2) - 2 * pointwise(eta) + pointwise(eta - eps2)
        ) / eps2**2
        assert np.allclose(first, fd_first, atol=1e-7)
        assert np.allclose(-minus_second, fd_second, atol=1e-5, rtol=1e-6)
        assert np.all(minus_second >= 0)  # concavity in eta


# -- hazard problem -----------------------------------------------------------


def _stacked_panel(rng, n=60, horizon=5):
    spec = make_spec(k=2)
    data = random_dataset(spec, rng, n=n, horizon=horizon)
    return spec, data.stacked


def test_hazard_drops_horizon_rows(rng):
    spec, stacked = _stacked_panel(rng)
    w = rng.uniform(0.1, 1.0, size=(stacked.outcomes.shape[0], 2))
    problem = build_hazard_problem(stacked, w, spec)
    assert problem.response.shape[0] == int((stacked.occasion < stacked.horizon).sum())
    assert problem.weights.shape[1] == 2


def test_constant_hazard_mle_is_logit_of_exit_rate(rng):
    # one state, no covariates: the MLE of the intercept is the empirical
    # exit log-odds over at-risk occasions
    spec = make_spec(k=1, q=0)
    data = random_dataset(spec, rng, n=80, horizon=5)
    stacked = data.stacked
    w = np.ones((stacked.outcomes.shape[0], 1))
    fit = fit_weighted_hazard(stacked, w, spec)
    keep = stacked.occasion < stacked.horizon
    rate = stacked.is_exit_row[keep].mean()
    assert fit.intercepts[0] == pytest.approx(sp_logit(rate), abs=1e-8)
    assert fit.slopes.shape == (0,)


def test_shared_hazard_equals_single_state_fit(rng):
    # with a shared intercept the state split of the weights is irrelevant
    spec_shared = make_spec(k=2, share_gamma=True)
    spec_single = make_spec(k=1)
    data = random_dataset(spec_shared, rng, n=60, horizon=5)
    stacked = data.stacked
    rows = stacked.outcomes.shape[0]
    split = rng.uniform(0.0, 1.0, size=rows)
    w2 = np.column_stack([split, 1.0 - split])
    fit_shared = fit_weighted_hazard(stacked, w2, spec_shared)
    fit_single = fit_weighted_hazard(stacked, np.ones((rows, 1)), spec_single)
    assert fit_shared.intercepts.shape == (1,)
    assert np.allclose(fit_shared.intercepts, fit_single.intercepts, atol=1e-9)
    assert np.allclose(fit_shared.slopes, fit_single.slopes, atol=1e-9)


def test_hazard_warm_start_converges_faster(rng):
    spec, stacked = _stacked_panel(rng, n=100)
    w = rng.uniform(0.1, 1.0, size=(stacked.outcomes.shape[0], 2))
    cold = fit_weighted_hazard(stacked, w, spec)
    coef = np.concatenate([cold.intercepts, cold.slopes])
    warm = fit_weighted_hazard(stacked, w, spec, init=coef)
    assert warm.n_iter <= cold.n_iter
    assert np.allclose(warm.intercepts, cold.intercepts, atol=1e-8)
