"""Score, observed information, standard errors, BIC, and the LR test."""

import importlib
import math

import numpy as np
import pytest
from scipy import stats

from lmdrop import (
    EmConfig,
    FitResult,
    bic,
    em_fit,
    expected_score,
    lr_test_dropout,
    multistart_fit,
    num_params,
    oakes_information,
    pack_params,
    q_function,
    unpack_params,
    wald_table,
)
from lmdrop.exceptions import (
    DomainError,
    NestingViolationError,
    SingularInformationError,
)
from lmdrop.inference import (
    numerical_information,
    packed_layout,
    report_labels,
    report_vector,
)
from lmdrop.recursions import smoothed_posteriors

from conftest import make_spec, random_dataset, random_params, two_state_config

simulate = importlib.import_module("lmdrop.simulate").simulate


@pytest.fixture(scope="module")
def fitted():
    config = two_state_config(n_subjects=150, horizon=7, seed=31)
    data, _ = simulate(config)
    result = em_fit(
        data,
        config.spec,
        EmConfig(tol_loglik=1e-10, tol_score=1e-7, max_iter=4000),
    )
    assert result.converged
    return config.spec, data, result


# -- expected score ------------------------------------------------------------


def test_score_vanishes_at_converged_fit(fitted):
    spec, data, result = fitted
    posts, _ = smoothed_posteriors(data, result.params, spec)
    score = expected_score(data, posts, result.params, spec)
    assert score.shape == (num_params(spec),)
    assert np.max(np.abs(score)) < 1e-6


def test_score_is_gradient_of_q_function(rng):
    # at arbitrary parameters, against central differences of the EM
    # surrogate with the posterior weights held fixed
    spec = make_spec(k=3, hazard_link="cloglog")
    data = random_dataset(spec, rng, n=25, horizon=5)
    params = random_params(spec, rng)
    posts, _ = smoothed_posteriors(data, params, spec)
    score = expected_score(data, posts, params, spec)
    x0 = pack_params(params, spec)
    eps = 1e-6
    fd = np.empty_like(x0)
    for j in range(x0.shape[0]):
        up, dn = x0.copy(), x0.copy()
        up[j] += eps
        dn[j] -= eps
        fd[j] = (
            q_function(data, posts, unpack_params(up, spec), spec)
            - q_function(data, posts, unpack_params(dn, spec), spec)
        ) / (2 * eps)
    scale = np.abs(fd) + 1.0
    assert np.max(np.abs(score - fd) / scale) < 1e-6


def test_score_single_state_gaussian_closed_form(rng):
    # k=1 gaussian intercept coordinate: sum of standardised residuals
    spec = make_spec(k=1)
    data = random_dataset(spec, rng, n=20, horizon=4)
    params = random_params(spec, rng)
    posts, _ = smoothed_posteriors(data, params, spec)
    score = expected_score(data, posts, params, spec)
    layout = packed_layout(spec)
    stacked = data.stacked
    mu = params.intercepts[0, 0] + stacked.channel_covariates[0] @ params.slopes[0]
    resid = stacked.outcomes[:, 0] - mu
    want_intercept = resid.sum() / params.sigma2[0]
    got = score[layout.channel_coefs[0]]
    assert got[0] == pytest.approx(want_intercept, rel=1e-10)
    # and the dispersion coordinate: d/dlog(sigma2)
    want_disp = (-0.5 + resid**2 / (2 * params.sigma2[0])).sum()
    assert score[layout.log_sigma2[0]] == pytest.approx(want_disp, rel=1e-10)


def test_q_function_value_consistent_with_loglik_at_fixpoint(fitted):
    # at a stationary point the EM surrogate and the loglik share gradients,
    # not values; but both must be finite and reproducible
    spec, data, result = fitted
    posts, ll = smoothed_posteriors(data, result.params, spec)
    q = q_function(data, posts, result.params, spec)
    assert np.isfinite(q)
    assert q <= ll + 1e-9  # entropy of the posteriors is nonnegative


# -- observed information -------------------------------------------------------


def test_oakes_matches_numerical_hessian(fitted):
    spec, data, result = fitted
    oakes = oakes_information(data, result.params, spec)
    brute = numerical_information(data, result.params, spec)
    denom = np.linalg.norm(brute.information)
    rel = np.linalg.norm(oakes.information - brute.information) / denom
    assert rel < 1e-3
    assert oakes.method == "oakes"
    assert brute.method == "numerical-hessian"
    rel_se = np.max(
        np.abs(oakes.se_packed - brute.se_packed) / (np.abs(brute.se_packed))
    )
    assert rel_se < 1e-3


def test_information_is_symmetric_and_positive_definite(fitted):
    spec, data, result = fitted
    info = oakes_information(data, result.params, spec)
    assert np.allclose(info.information, info.information.T, atol=0.0)
    assert info.positive_definite
    assert info.asymmetry < 1e-4
    eigvals = np.linalg.eigvalsh(info.information)
    assert eigvals[0] > 0
    assert info.condition_number == pytest.approx(eigvals[-1] / eigvals[0], rel=1e-8)


def test_information_result_shapes(fitted):
    spec, data, result = fitted
    info = oakes_information(data, result.params, spec)
    m = num_params(spec)
    assert info.information.shape == (m, m)
    assert info.covariance.shape == (m, m)
    assert info.se_packed.shape == (m,)
    assert len(info.packed_labels) == m
    assert len(info.report_labels) == len(info.report_values)
    assert len(info.report_labels) == len(info.report_se)
    assert info.fd_step == 1e-5
    assert np.all(info.se_packed > 0)


def test_single_state_gaussian_closed_form_ses(rng):
    # one state, one gaussian channel: the information factorises and the
    # channel block is the usual least-squares one
    spec = make_spec(k=1, families=("gaussian",), p=(1,), q=1)
    data = random_dataset(spec, rng, n=60, horizon=5)
    result = em_fit(data, spec, EmConfig(tol_loglik=1e-12, max_iter=200))
    assert result.converged
    info = oakes_information(data, result.params, spec)

    stacked = data.stacked
    n_rows = stacked.outcomes.shape[0]
    x = np.column_stack([np.ones(n_rows), stacked.channel_covariates[0][:, 0]])
    sigma2 = result.params.sigma2[0]
    cov_coef = sigma2 * np.linalg.inv(x.T @ x)
    want = np.sqrt(np.diag(cov_coef))
    layout = packed_layout(spec)
    got = info.se_packed[layout.channel_coefs[0]]
    assert np.allclose(got, want, atol=1e-4 * np.max(want) + 1e-8)
    # dispersion on the log scale: sqrt(2 / n)
    se_logs2 = info.se_packed[layout.log_sigma2[0]]
    assert se_logs2 == pytest.approx(math.sqrt(2.0 / n_rows), rel=1e-4)


def test_ses_equivariant_under_state_relabeling(fitted):
    spec, data, result = fitted
    info = oakes_information(data, result.params, spec)
    flipped = result.params.permute_states(np.array([1, 0]))
    info_f = oakes_information(data, flipped, spec)
    layout = packed_layout(spec)
    for h in range(spec.r):
        sl = layout.channel_coefs[h]
        a = info.se_packed[sl]
        b = info_f.se_packed[sl]
        # intercept block permutes, slope block is shared
        assert np.allclose(a[:2][::-1], b[:2], rtol=1e-6)
        assert np.allclose(a[2:], b[2:], rtol=1e-6)
    a = info.se_packed[layout.hazard]
    b = info_f.se_packed[layout.hazard]
    assert np.allclose(a[:2][::-1], b[:2], rtol=1e-6)
    assert np.allclose(a[2:], b[2:], rtol=1e-6)


def test_singular_information_carries_partial_result(rng):
    # duplicate states make the model overparameterised; the information is
    # singular and the error must still expose the computed matrix
    spec = make_spec(k=2)
    data = random_dataset(spec, rng, n=30, horizon=4)
    p1 = random_params(make_spec(k=1), rng)
    twin = p1.__class__(
        init_probs=np.array([0.5, 0.5]),
        trans=np.array([[0.5, 0.5], [0.5, 0.5]]),
        intercepts=np.repeat(p1.intercepts, 2, axis=1),
        slopes=p1.slopes,
        sigma2=p1.sigma2,
        hazard_intercepts=np.repeat(p1.hazard_intercepts, 2),
        hazard_slopes=p1.hazard_slopes,
    )
    with pytest.raises(SingularInformationError) as err:
        oakes_information(data, twin, spec)
    partial = err.value.result
    assert partial is not None
    assert partial.information.shape == (num_params(spec), num_params(spec))
    assert partial.covariance is None
    assert partial.se_packed is None
    assert not partial.positive_definite


# -- reporting -----------------------------------------------------------------


def test_report_vector_matches_definitions(fitted):
    spec, data, result = fitted
    labels, is_slope = report_labels(spec)
    values = report_vector(result.params, spec)
    assert len(labels) == values.shape[0] == is_slope.shape[0]
    by_label = dict(zip(labels, values))
    p = result.params
    assert by_label["y1.mean_intercept"] == pytest.approx(p.intercepts[0].mean())
    assert by_label["y1.intercept_dev[1]"] == pytest.approx(
        p.intercepts[0, 0] - p.intercepts[0].mean()
    )
    assert by_label["y1.slope.y1.x1"] == pytest.approx(p.slopes[0][0])
    assert by_label["y1.sigma2"] == pytest.approx(p.sigma2[0])
    assert by_label["hazard.mean_intercept"] == pytest.approx(
        p.hazard_intercepts.mean()
    )
    assert by_label["init_prob[1]"] == pytest.approx(p.init_probs[0])
    assert by_label["trans[1,2]"] == pytest.approx(p.trans[0, 1])
    # slope flags: covariate effects only
    flagged = {lab for lab, s in zip(labels, is_slope) if s}
    assert flagged == {"y1.slope.y1.x1", "y2.slope.y2.x1", "hazard.slope.z1"}


def test_wald_table_t_ratios_only_for_slopes(fitted):
    spec, data, result = fitted
    info = oakes_information(data, result.params, spec)
    rows = wald_table(info)
    assert len(rows) == len(info.report_labels)
    for row in rows:
        if row.t is not None:
            assert row.se is not None and row.se > 0
            assert row.t == pytest.approx(row.estimate / row.se, rel=1e-12)
    with_t = {r.label for r in rows if r.t is not None}
    assert with_t == {"y1.slope.y1.x1", "y2.slope.y2.x1", "hazard.slope.z1"}


# -- BIC ----------------------------------------------------------------------


def test_bic_formula(fitted):
    spec, data, result = fitted
    n = len(data.subjects)
    want = -2.0 * result.loglik + num_params(spec) * math.log(n)
    assert bic(result.loglik, spec, n) == pytest.approx(want, rel=1e-12)


def test_bic_zero_loglik_counts_parameters():
    spec = make_spec(k=2)
    assert bic(0.0, spec, 100) == pytest.approx(num_params(spec) * math.log(100))


def test_bic_penalises_extra_states():
    ll = -1000.0
    n = 200
    vals = [bic(ll, make_spec(k=k), n) for k in (1, 2, 3)]
    assert vals[0] < vals[1] < vals[2]


# -- LR test -------------------------------------------------------------------


def _fit_pair(seed=3, n=150):
    config_null = two_state_config(n_subjects=n, horizon=7, seed=seed, share_gamma=True)
    data, _ = simulate(config_null)
    spec_free = make_spec(k=2, share_gamma=False)
    spec_null = make_spec(k=2, share_gamma=True)
    fit_null = multistart_fit(data, spec_null, EmConfig(n_random_starts=1, max_iter=500))
    gamma = np.repeat(fit_null.params.hazard_intercepts, 2)
    seeded = fit_null.params.__class__(
        init_probs=fit_null.params.init_probs,
        trans=fit_null.params.trans,
        intercepts=fit_null.params.intercepts,
        slopes=fit_null.params.slopes,
        sigma2=fit_null.params.sigma2,
        hazard_intercepts=gamma,
        hazard_slopes=fit_null.params.hazard_slopes,
    )
    fit_free = multistart_fit(
        data,
        spec_free,
        EmConfig(n_random_starts=1, max_iter=500),
        extra_inits=(seeded,),
    )
    return data, fit_free, fit_null


def test_lr_test_under_null(rng):
    data, fit_free, fit_null = _fit_pair()
    report = lr_test_dropout(fit_free, fit_null)
    assert report.df == 1
    assert report.statistic >= 0.0
    assert report.loglik_free >= report.loglik_null - 1e-9
    assert 0.0 <= report.p_value <= 1.0
    assert report.p_value == pytest.approx(
        stats.chi2.sf(report.statistic, 1), rel=1e-12
    )


def test_lr_test_identical_logliks_gives_zero():
    spec_free = make_spec(k=2)
    spec_null = make_spec(k=2, share_gamma=True)
    rng = np.random.default_rng(1)
    pf = random_params(spec_free, rng)
    pn = random_params(spec_null, rng)
    mk = lambda p, s: FitResult(
        params=p, loglik=-500.0, spec=s, converged=True, n_iter=3,
        trace=np.array([-510.0, -500.0]),
    )
    report = lr_test_dropout(mk(pf, spec_free), mk(pn, spec_null))
    assert report.statistic == 0.0
    assert report.p_value == pytest.approx(1.0)


def test_lr_test_rejects_non_nested_specs():
    rng = np.random.default_rng(2)
    spec_free = make_spec(k=2)
    spec_null_k3 = make_spec(k=3, share_gamma=True)
    mk = lambda p, s, ll: FitResult(
        params=p, loglik=ll, spec=s, converged=True, n_iter=1, trace=np.array([ll])
    )
    free = mk(random_params(spec_free, rng), spec_free, -100.0)
    null = mk(random_params(spec_null_k3, rng), spec_null_k3, -110.0)
    with pytest.raises(DomainError):
        lr_test_dropout(free, null)
    # swapped roles are also refused
    null2 = mk(random_params(make_spec(k=2, share_gamma=True), rng),
               make_spec(k=2, share_gamma=True), -110.0)
    with pytest.raises(DomainError):
        lr_test_dropout(null2, free)
    # spec pin
    with pytest.raises(DomainError):
        lr_test_dropout(free, null2, spec=make_spec(k=3))


def test_lr_test_detects_nesting_violation():
    rng = np.random.default_rng(4)
    spec_free = make_spec(k=2)
    spec_null = make_spec(k=2, share_gamma=True)
    mk = lambda p, s, ll: FitResult(
        params=p, loglik=ll, spec=s, converged=True, n_iter=1, trace=np.array([ll])
    )
    free = mk(random_params(spec_free, rng), spec_free, -120.0)
    null = mk(random_params(spec_null, rng), spec_null, -100.0)
    with pytest.raises(NestingViolationError):
        lr_test_dropout(free, null)


def test_lr_test_df_zero_for_single_state():
    rng = np.random.default_rng(5)
    spec_free = make_spec(k=1)
    spec_null = make_spec(k=1, share_gamma=True)
    mk = lambda p, s, ll: FitResult(
        params=p, loglik=ll, spec=s, converged=True, n_iter=1, trace=np.array([ll])
    )
    report = lr_test_dropout(
        mk(random_params(spec_free, rng), spec_free, -100.0),
        mk(random_params(spec_null, rng), spec_null, -100.0),
    )
    assert report.df == 0
    assert math.isnan(report.p_value)
