"""Inference after fitting: scores, observed information, model comparison.

The observed information is assembled with the missing-information identity:
the exact Jacobian of the expected complete-data score with respect to the
parameters at frozen posterior weights, plus a central-difference Jacobian of
the same score through the dependence of the weights on the parameters.
Standard errors computed in the unconstrained packed basis are transported to
the reporting basis (probabilities, state-averaged intercepts, deviations)
with the delta method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import chi2

from .data import PanelDataset
from .exceptions import DomainError, NestingViolationError, SingularInformationError
from .glm import _assemble_gram, _assemble_rhs, binary_eta_derivatives
from .model import (
    GAUSSIAN,
    ModelSpec,
    ParamSet,
    ReportNames,
    default_names,
    hazard_logterms,
    num_params,
    pack_params,
    packed_labels,
    reported_params,
    unpack_params,
)
from .recursions import Posteriors, smoothed_posteriors

if TYPE_CHECKING:  # pragma: no cover
    from .em import FitResult

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# packed coordinate layout


@dataclass(frozen=True)
class PackedLayout:
    """Slices of each parameter block inside the packed vector."""

    init: slice
    trans_rows: tuple[slice, ...]
    channel_coefs: tuple[slice, ...]
    log_sigma2: dict[int, int]
    hazard: slice
    m: int


def packed_layout(spec: ModelSpec) -> PackedLayout:
    k = spec.k
    pos = 0
    if k > 1:
        init = slice(pos, pos + k - 1)
        pos += k - 1
        trans_rows = []
        for _ in range(k):
            trans_rows.append(slice(pos, pos + k - 1))
            pos += k - 1
    else:
        init = slice(0, 0)
        trans_rows = []
    channel_coefs = []
    for ch in spec.channels:
        channel_coefs.append(slice(pos, pos + k + ch.n_covariates))
        pos += k + ch.n_covariates
    log_sigma2 = {}
    for h in spec.gaussian_channels:
        log_sigma2[h] = pos
        pos += 1
    hazard = slice(pos, pos + spec.n_gamma + spec.q)
    pos += spec.n_gamma + spec.q
    return PackedLayout(
        init=init,
        trans_rows=tuple(trans_rows),
        channel_coefs=tuple(channel_coefs),
        log_sigma2=log_sigma2,
        hazard=hazard,
        m=pos,
    )


# ---------------------------------------------------------------------------
# expected complete-data score and objective


def _posterior_totals(posteriors: list[Posteriors]):
    weights = np.concatenate([p.state_marginals for p in posteriors])
    first = np.stack([p.state_marginals[0] for p in posteriors])
    k = weights.shape[1]
    pairs = np.zeros((k, k))
    for p in posteriors:
        if p.pair_marginals is not None:
            pairs += p.pair_marginals.sum(axis=0)
    return weights, first.sum(axis=0), pairs


def _hazard_parts(stacked, weights, params: ParamSet, spec: ModelSpec):
    keep = stacked.occasion < stacked.horizon
    w = weights[keep]
    if spec.share_gamma:
        w = w.sum(axis=1, keepdims=True)
    z = stacked.hazard_covariates[keep]
    d = stacked.is_exit_row[keep].astype(float)
    eta = (z @ params.hazard_slopes)[:, None] + params.hazard_intercepts[None, :]
    return w, z, d, eta


def expected_score(
    data: PanelDataset,
    posteriors: list[Posteriors],
    params: ParamSet,
    spec: ModelSpec,
) -> np.ndarray:
    """Gradient of the expected complete-data log-likelihood at frozen
    posterior weights, in packed coordinates.

    Zero (to solver tolerance) at an EM fixed point; by the missing-data
    score identity it then also estimates the observed-data score.
    """
    stacked = data.stacked
    weights, first_totals, pair_totals = _posterior_totals(posteriors)
    k = spec.k
    parts: list[np.ndarray] = []
    if k > 1:
        n_total = first_totals.sum()
        parts.append(first_totals[1:] - n_total * params.init_probs[1:])
        row_totals = pair_totals.sum(axis=1)
        for u in range(k):
            parts.append(pair_totals[u, 1:] - row_totals[u] * params.trans[u, 1:])
    sigma_parts: list[float] = []
    for h, ch in enumerate(spec.channels):
        x = stacked.channel_covariates[h]
        y = stacked.outcomes[:, h]
        eta = (x @ params.slopes[h])[:, None] + params.intercepts[h][None, :]
        if ch.family == GAUSSIAN:
            s2 = float(params.sigma2[h])
            resid = y[:, None] - eta
            cell = weights * resid / s2
            sigma_parts.append(
                float(np.sum(weights * (-0.5 + resid**2 / (2.0 * s2))))
            )
        else:
            fderiv, _ = binary_eta_derivatives(eta, y, ch.link)
            cell = weights * fderiv
        parts.append(cell.sum(axis=0))
        parts.append(x.T @ cell.sum(axis=1))
    parts.append(np.asarray(sigma_parts))
    w, z, d, eta = _hazard_parts(stacked, weights, params, spec)
    fderiv, _ = binary_eta_derivatives(eta, d, spec.hazard_link)
    cell = w * fderiv
    parts.append(cell.sum(axis=0))
    parts.append(z.T @ cell.sum(axis=1))
    return np.concatenate([np.atleast_1d(p) for p in parts])


def q_function(
    data: PanelDataset,
    posteriors: list[Posteriors],
    params: ParamSet,
    spec: ModelSpec,
) -> float:
    """Expected complete-data log-likelihood at frozen posterior weights."""
    stacked = data.stacked
    weights, first_totals, pair_totals = _posterior_totals(posteriors)

    def _wsum(w, value):
        return float(np.sum(np.where(w > 0, w * value, 0.0)))

    with np.errstate(divide="ignore"):
        total = _wsum(first_totals, np.log(params.init_probs))
        total += _wsum(pair_totals, np.log(params.trans))
    for h, ch in enumerate(spec.channels):
        x = stacked.channel_covariates[h]
        y = stacked.outcomes[:, h]
        eta = (x @ params.slopes[h])[:, None] + params.intercepts[h][None, :]
        if ch.family == GAUSSIAN:
            s2 = float(params.sigma2[h])
            ll = -0.5 * (_LOG_2PI + np.log(s2)) - (y[:, None] - eta) ** 2 / (2.0 * s2)
        else:
            ll = y[:, None] * eta - np.logaddexp(0.0, eta)
        total += _wsum(weights, ll)
    w, z, d, eta = _hazard_parts(stacked, weights, params, spec)
    log_p, log_1mp = hazard_logterms(eta, spec.hazard_link)
    total += _wsum(w, d[:, None] * log_p + (1.0 - d[:, None]) * log_1mp)
    return total


# ---------------------------------------------------------------------------
# observed information via the missing-information identity


def _assemble_curvature(
    data: PanelDataset,
    posteriors: list[Posteriors],
    params: ParamSet,
    spec: ModelSpec,
) -> np.ndarray:
    """Exact negated Jacobian of :func:`expected_score` at frozen weights."""
    stacked = data.stacked
    weights, first_totals, pair_totals = _posterior_totals(posteriors)
    layout = packed_layout(spec)
    k = spec.k
    j1 = np.zeros((layout.m, layout.m))
    if k > 1:
        pi = params.init_probs
        j1[layout.init, layout.init] = first_totals.sum() * (
            np.diag(pi) - np.outer(pi, pi)
        )[1:, 1:]
        for u, sl in enumerate(layout.trans_rows):
            rowp = params.trans[u]
            j1[sl, sl] = pair_totals[u].sum() * (np.diag(rowp) - np.outer(rowp, rowp))[
                1:, 1:
            ]
    for h, ch in enumerate(spec.channels):
        x = stacked.channel_covariates[h]
        y = stacked.outcomes[:, h]
        eta = (x @ params.slopes[h])[:, None] + params.intercepts[h][None, :]
        sl = layout.channel_coefs[h]
        if ch.family == GAUSSIAN:
            s2 = float(params.sigma2[h])
            j1[sl, sl] = _assemble_gram(x, weights) / s2
            resid = y[:, None] - eta
            cross = _assemble_rhs(x, weights * resid) / s2
            idx = layout.log_sigma2[h]
            j1[sl, idx] = cross
            j1[idx, sl] = cross
            j1[idx, idx] = float(np.sum(weights * resid**2)) / (2.0 * s2)
        else:
            _, sderiv = binary_eta_derivatives(eta, y, ch.link)
            j1[sl, sl] = _assemble_gram(x, weights * sderiv)
    w, z, d, eta = _hazard_parts(stacked, weights, params, spec)
    _, sderiv = binary_eta_derivatives(eta, d, spec.hazard_link)
    j1[layout.hazard, layout.hazard] = _assemble_gram(z, w * sderiv)
    return j1


@dataclass(frozen=True)
class InformationResult:
    """Observed information and derived standard errors.

    ``covariance``/``se_packed``/``report_se`` are None when the information
    matrix is not positive definite.  ``method`` records how the matrix was
    obtained: "oakes" or "numerical-hessian".
    """

    information: np.ndarray
    packed_labels: tuple[str, ...]
    covariance: np.ndarray | None
    se_packed: np.ndarray | None
    report_labels: tuple[str, ...]
    report_values: np.ndarray
    report_se: np.ndarray | None
    report_is_slope: np.ndarray
    condition_number: float
    asymmetry: float
    fd_step: float
    positive_definite: bool
    method: str = "oakes"


def oakes_information(
    data: PanelDataset,
    params: ParamSet,
    spec: ModelSpec,
    fd_step: float = 1e-5,
    names: ReportNames | None = None,
) -> InformationResult:
    """Observed information at ``params`` (normally a converged fit).

    The weight-dependence Jacobian uses central differences with step
    ``fd_step * (|theta_j| + 1)`` per coordinate; each coordinate costs two
    posterior passes.  Raises :class:`SingularInformationError` carrying the
    partial result when the matrix is not positive definite.
    """
    params.validate(spec)
    posteriors, _ = smoothed_posteriors(data, params, spec)
    j1 = _assemble_curvature(data, posteriors, params, spec)
    x0 = pack_params(params, spec)
    m = x0.shape[0]
    j2 = np.empty((m, m))
    for j in range(m):
        h = fd_step * (abs(x0[j]) + 1.0)
        step = np.zeros(m)
        step[j] = h
        post_plus, _ = smoothed_posteriors(data, unpack_params(x0 + step, spec), spec)
        post_minus, _ = smoothed_posteriors(data, unpack_params(x0 - step, spec), spec)
        s_plus = expected_score(data, post_plus, params, spec)
        s_minus = expected_score(data, post_minus, params, spec)
        j2[:, j] = -(s_plus - s_minus) / (2.0 * h)
    return _finish_information(j1 + j2, x0, params, spec, fd_step, names, "oakes")


def numerical_information(
    data: PanelDataset,
    params: ParamSet,
    spec: ModelSpec,
    step: float = 1e-5,
    names: ReportNames | None = None,
) -> InformationResult:
    """Observed information as the negated central-difference Hessian of the
    observed log-likelihood.  Validation route only: quadratic in the
    parameter count and noisier than :func:`oakes_information`."""
    from .oracle import brute_observed_hessian

    params.validate(spec)
    hessian = brute_observed_hessian(data, params, spec, step=step)
    x0 = pack_params(params, spec)
    return _finish_information(
        -hessian, x0, params, spec, step, names, "numerical-hessian"
    )


def _finish_information(
    info: np.ndarray,
    x0: np.ndarray,
    params: ParamSet,
    spec: ModelSpec,
    fd_step: float,
    names: ReportNames | None,
    method: str,
) -> InformationResult:
    """Symmetrise, invert, and transport to the reporting basis."""
    scale = float(np.max(np.abs(info))) or 1.0
    asymmetry = float(np.max(np.abs(info - info.T))) / scale
    info = 0.5 * (info + info.T)

    eigvals = np.linalg.eigvalsh(info)
    positive_definite = bool(eigvals[0] > 0)
    condition = float(eigvals[-1] / eigvals[0]) if positive_definite else float("inf")
    covariance = se_packed = report_se = None
    if positive_definite:
        covariance = np.linalg.inv(info)
        diag = np.diag(covariance)
        if np.any(diag <= 0):
            positive_definite = False
            covariance = None
        else:
            se_packed = np.sqrt(diag)

    labels, is_slope = report_labels(spec, names)
    values = report_vector(params, spec)
    if covariance is not None:
        jac = _report_jacobian(x0, spec)
        report_var = np.einsum("ij,jk,ik->i", jac, covariance, jac)
        report_se = np.sqrt(np.maximum(report_var, 0.0))
    result = InformationResult(
        information=info,
        packed_labels=tuple(packed_labels(spec, names)),
        covariance=covariance,
        se_packed=se_packed,
        report_labels=tuple(labels),
        report_values=values,
        report_se=report_se,
        report_is_slope=is_slope,
        condition_number=condition,
        asymmetry=asymmetry,
        fd_step=fd_step,
        positive_definite=positive_definite,
        method=method,
    )
    if not positive_definite:
        raise SingularInformationError(
            "observed information is not positive definite; standard errors "
            "suppressed",
            result=result,
        )
    return result


# ---------------------------------------------------------------------------
# reporting basis


def report_labels(
    spec: ModelSpec, names: ReportNames | None = None
) -> tuple[list[str], np.ndarray]:
    """Labels of the reporting vector and a mask of slope entries."""
    if names is None:
        names = default_names(spec)
    k = spec.k
    labels: list[str] = []
    slope: list[bool] = []

    def add(label: str, is_slope: bool = False):
        labels.append(label)
        slope.append(is_slope)

    for h in range(spec.r):
        cn = names.channel_names[h]
        add(f"{cn}.mean_intercept")
        for u in range(k):
            add(f"{cn}.intercept_dev[{u + 1}]")
        for c in names.channel_covariate_names[h]:
            add(f"{cn}.slope.{c}", True)
    for h in spec.gaussian_channels:
        add(f"{names.channel_names[h]}.sigma2")
    add("hazard.mean_intercept")
    if not spec.share_gamma:
        for u in range(k):
            add(f"hazard.intercept_dev[{u + 1}]")
    for c in names.hazard_covariate_names:
        add(f"hazard.slope.{c}", True)
    for u in range(k):
        add(f"init_prob[{u + 1}]")
    for u in range(k):
        for v in range(k):
            add(f"trans[{u + 1},{v + 1}]")
    return labels, np.asarray(slope, dtype=bool)


def report_vector(params: ParamSet, spec: ModelSpec) -> np.ndarray:
    """Parameter values in reporting order (matches :func:`report_labels`)."""
    rep = reported_params(params, spec)
    parts: list[np.ndarray] = []
    for h in range(spec.r):
        parts.append(np.atleast_1d(rep.mean_intercepts[h]))
        parts.append(rep.intercept_deviations[h])
        parts.append(rep.slopes[h])
    for h in spec.gaussian_channels:
        parts.append(np.atleast_1d(rep.sigma2[h]))
    parts.append(np.atleast_1d(rep.mean_hazard_intercept))
    if not spec.share_gamma:
        parts.append(rep.hazard_intercept_deviations)
    parts.append(rep.hazard_slopes)
    parts.append(rep.init_probs)
    parts.append(rep.trans.ravel())
    return np.concatenate(parts)


def _report_jacobian(x0: np.ndarray, spec: ModelSpec, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the packed-to-reporting map."""
    m = x0.shape[0]
    columns = []
    for j in range(m):
        h = step * (abs(x0[j]) + 1.0)
        delta = np.zeros(m)
        delta[j] = h
        plus = report_vector(unpack_params(x0 + delta, spec), spec)
        minus = report_vector(unpack_params(x0 - delta, spec), spec)
        columns.append((plus - minus) / (2.0 * h))
    return np.column_stack(columns)


# ---------------------------------------------------------------------------
# model comparison


def bic(loglik: float, spec: ModelSpec, n_subjects: int) -> float:
    """Bayesian information criterion, penalised by the subject count."""
    if n_subjects < 1:
        raise DomainError("n_subjects must be >= 1")
    return -2.0 * loglik + num_params(spec) * float(np.log(n_subjects))


@dataclass(frozen=True)
class WaldRow:
    label: str
    estimate: float
    se: float | None
    t: float | None


def wald_table(info: InformationResult) -> list[WaldRow]:
    """Estimates with standard errors; t-ratios for slope entries only."""
    rows = []
    for j, label in enumerate(info.report_labels):
        se = float(info.report_se[j]) if info.report_se is not None else None
        t = None
        if info.report_is_slope[j] and se is not None and se > 0:
            t = float(info.report_values[j]) / se
        rows.append(WaldRow(label=label, estimate=float(info.report_values[j]), se=se, t=t))
    return rows


@dataclass(frozen=True)
class TestReport:
    """Likelihood-ratio comparison of state-specific versus shared hazard
    intercepts; the chi-square reference with ``k - 1`` degrees of freedom is
    the standard asymptotic choice."""

    statistic: float
    df: int
    loglik_free: float
    loglik_null: float
    p_value: float
    wald: list[WaldRow] | None = None


def lr_test_dropout(
    fit_free: "FitResult", fit_null: "FitResult", spec: ModelSpec | None = None
) -> TestReport:
    """LR test of informative drop-out: shared vs state-specific intercepts.

    ``spec`` optionally pins the unconstrained specification both fits must
    match.  Raises :class:`NestingViolationError` when the constrained fit
    beats the unconstrained one beyond rounding, which signals an
    optimisation failure rather than a statistical result.
    """
    free_spec, null_spec = fit_free.spec, fit_null.spec
    if spec is not None and free_spec != spec:
        raise DomainError("unconstrained fit does not match the given spec")
    if free_spec.share_gamma or not null_spec.share_gamma:
        raise DomainError(
            "expected an unconstrained fit and a shared-intercept null fit"
        )
    if (
        free_spec.n_states != null_spec.n_states
        or free_spec.channels != null_spec.channels
        or free_spec.n_hazard_covariates != null_spec.n_hazard_covariates
        or free_spec.hazard_link != null_spec.hazard_link
    ):
        raise DomainError("fits are not nested: specifications differ")
    statistic = 2.0 * (fit_free.loglik - fit_null.loglik)
    if statistic < -1e-6:
        raise NestingViolationError(
            f"constrained loglik {fit_null.loglik:.6f} exceeds unconstrained "
            f"{fit_free.loglik:.6f}"
        )
    df = free_spec.n_states - 1
    p_value = float(chi2.sf(max(statistic, 0.0), df)) if df > 0 else float("nan")
    return TestReport(
        statistic=statistic,
        df=df,
        loglik_free=fit_free.loglik,
        loglik_null=fit_null.loglik,
        p_value=p_value,
    )
