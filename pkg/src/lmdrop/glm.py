"""Weighted GLM subproblems of the M-step.

Each subproblem lives on conceptually state-expanded rows ``(row, state)``:
the design is ``[one-hot(state), x[row]]`` with response ``y[row]`` and
weight ``weights[row, state]``.  The solvers never materialise the expansion;
they assemble the normal equations blockwise from ``(rows, k)`` arrays, which
keeps memory linear in the panel size.  :meth:`StateWeightedGlm.expand`
builds the explicit expansion for cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import RankError, SeparationError
from .model import (
    BERNOULLI,
    CLOGLOG,
    GAUSSIAN,
    LOGIT,
    ModelSpec,
    hazard_logterms,
)

P_CLAMP = 1e-12          # hazard/bernoulli probability clamp inside iterations
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class StateWeightedGlm:
    """A weighted GLM over implicit state-expanded rows."""

    covariates: np.ndarray          # (rows, p) shared slope columns
    response: np.ndarray            # (rows,)
    weights: np.ndarray             # (rows, k) nonnegative
    family: str
    link: str
    labels: tuple[str, ...] = ()    # k intercept labels then p covariate labels

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        rows = self.response.shape[0]
        if self.covariates.ndim != 2 or self.covariates.shape[0] != rows:
            raise ValueError("covariates must be (rows, p)")
        if self.weights.ndim != 2 or self.weights.shape[0] != rows:
            raise ValueError("weights must be (rows, k)")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if not self.labels:
            k, p = self.n_states, self.n_covariates
            self.labels = tuple(
                [f"intercept[{u + 1}]" for u in range(k)]
                + [f"x[{j + 1}]" for j in range(p)]
            )

    @property
    def n_states(self) -> int:
        return self.weights.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def linear_predictor(self, coef: np.ndarray) -> np.ndarray:
        """Per (row, state) linear predictor, shape ``(rows, k)``."""
        k = self.n_states
        return (self.covariates @ coef[k:])[:, None] + coef[:k][None, :]

    def expand(self):
        """Materialise the state expansion: ``(X, y, w)`` with ``rows * k`` rows.

        For validation only; solvers never call this.
        """
        rows, k = self.weights.shape
        p = self.n_covariates
        idx = np.arange(rows * k)
        row = idx // k
        state = idx % k
        x = np.zeros((rows * k, k + p))
        x[idx, state] = 1.0
        x[:, k:] = self.covariates[row]
        return x, self.response[row], self.weights[row, state]


# ---------------------------------------------------------------------------
# block assembly


def _assemble_gram(x: np.ndarray, cellw: np.ndarray) -> np.ndarray:
    """Gram matrix of the expanded design under per-cell weights ``(rows, k)``."""
    k = cellw.shape[1]
    p = x.shape[1]
    g = np.zeros((k + p, k + p))
    g[:k, :k][np.diag_indices(k)] = cellw.sum(axis=0)
    m = cellw.T @ x
    g[:k, k:] = m
    g[k:, :k] = m.T
    g[k:, k:] = x.T @ (x * cellw.sum(axis=1)[:, None])
    return g


def _assemble_rhs(x: np.ndarray, cell: np.ndarray) -> np.ndarray:
    """Expanded-design cross-product with per-cell values ``(rows, k)``."""
    return np.concatenate([cell.sum(axis=0), x.T @ cell.sum(axis=1)])


def _check_rank(gram: np.ndarray, labels: tuple[str, ...], rtol: float = 1e-9):
    _, r, piv = scipy.linalg.qr(gram, pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size and diag[0] > 0 else 0.0
    if scale == 0.0:
        raise RankError("design has zero total weight", columns=tuple(labels))
    bad = piv[np.flatnonzero(diag <= rtol * scale)]
    if bad.size:
        names = tuple(labels[j] for j in sorted(bad))
        raise RankError(
            f"rank-deficient design; collinear columns: {', '.join(names)}",
            columns=names,
        )


# ---------------------------------------------------------------------------
# gaussian


@dataclass(frozen=True)
class GaussianFit:
    intercepts: np.ndarray  # (k,)
    slopes: np.ndarray      # (p,)
    sigma2: float

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.intercepts, self.slopes])


def gaussian_weighted_loglik(
    problem: StateWeightedGlm, intercepts, slopes, sigma2: float
) -> float:
    """Weighted gaussian log-likelihood at given parameters."""
    coef = np.concatenate([np.atleast_1d(intercepts), np.atleast_1d(slopes)])
    eta = problem.linear_predictor(coef)
    resid2 = (problem.response[:, None] - eta) ** 2
    ll = -0.5 * (_LOG_2PI + np.log(sigma2)) - resid2 / (2.0 * sigma2)
    w = problem.weights
    return float(np.sum(np.where(w > 0, w * ll, 0.0)))


def fit_weighted_gaussian(problem: StateWeightedGlm, rank_rtol: float = 1e-9) -> GaussianFit:
    """Exact weighted least squares with the dispersion at its weighted MLE.

    Raises :class:`RankError` naming the collinear columns when the weighted
    design is rank deficient.
    """
    if problem.family != GAUSSIAN:
        raise ValueError("problem is not gaussian")
    x, y, w = problem.covariates, problem.response, problem.weights
    k = problem.n_states
    gram = _assemble_gram(x, w)
    _check_rank(gram, problem.labels, rank_rtol)
    rhs = _assemble_rhs(x, w * y[:, None])
    coef = np.linalg.solve(gram, rhs)
    eta = problem.linear_predictor(coef)
    total = w.sum()
    sigma2 = float(np.sum(w * (y[:, None] - eta) ** 2) / total)
    return GaussianFit(intercepts=coef[:k], slopes=coef[k:], sigma2=sigma2)


# ---------------------------------------------------------------------------
# bernoulli (logit or cloglog)


def binary_eta_derivatives(eta: np.ndarray, y, link: str):
    """First derivative and negated second derivative of the bernoulli
    log-likelihood with respect to its linear predictor, per unit weight.

    ``y`` broadcasts against ``eta``.  Probabilities are clamped to
    ``[P_CLAMP, 1 - P_CLAMP]`` to keep the terms finite at extreme
    predictors.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1 and eta.ndim == 2:
        y = y[:, None]
    if link == LOGIT:
        p = np.clip(_expit(eta), P_CLAMP, 1.0 - P_CLAMP)
        return y - p, p * (1.0 - p)
    if link == CLOGLOG:
        ex = np.exp(eta)
        p = np.clip(-np.expm1(-ex), P_CLAMP, 1.0 - P_CLAMP)
        g = np.exp(eta - ex) / p
        first = y * g - (1.0 - y) * ex
        second = y * (g * g + g * (ex - 1.0)) + (1.0 - y) * ex
        return first, second
    raise ValueError(f"unknown link {link!r}")


def _expit(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fisher_weight(eta: np.ndarray, link: str) -> np.ndarray:
    """Expected-information weight per unit row weight."""
    if link == LOGIT:
        p = np.clip(_expit(eta), P_CLAMP, 1.0 - P_CLAMP)
        return p * (1.0 - p)
    ex = np.exp(eta)
    p = np.clip(-np.expm1(-ex), P_CLAMP, 1.0 - P_CLAMP)
    dmu = np.exp(eta - ex)
    return dmu * dmu / (p * (1.0 - p))


def binary_weighted_loglik(problem: StateWeightedGlm, coef: np.ndarray) -> float:
    """Weighted bernoulli log-likelihood at ``coef`` (no clamping)."""
    eta = problem.linear_predictor(np.asarray(coef, dtype=float))
    log_p, log_1mp = hazard_logterms(eta, problem.link)
    y = problem.response[:, None]
    ll = y * log_p + (1.0 - y) * log_1mp
    w = problem.weights
    return float(np.sum(np.where(w > 0, w * ll, 0.0)))


@dataclass(frozen=True)
class BinaryFit:
    intercepts: np.ndarray
    slopes: np.ndarray
    n_iter: int

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.intercepts, self.slopes])


def fit_weighted_bernoulli(
    problem: StateWeightedGlm,
    init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> BinaryFit:
    """Weighted bernoulli maximum likelihood by Fisher scoring.

    Newton steps (identical to iteratively reweighted least squares under the
    canonical logit link) with step halving; stops when the score max-norm
    falls under ``tol``.  The final objective never falls below the starting
    one beyond rounding.

    Raises
    ------
    SeparationError
        When a state carries no events (or no non-events), when the iteration
        diverges, or when it fails to converge within ``max_iter``.
    RankError
        When the weighted design is rank deficient.
    """
    if problem.family != BERNOULLI:
        raise ValueError("problem is not bernoulli")
    x, y, w = problem.covariates, problem.response, problem.weights
    k = problem.n_states

    trials = w.sum(axis=0)
    events = (w * y[:, None]).sum(axis=0)
    for u in range(k):
        if trials[u] > 0 and (events[u] <= 0.0 or events[u] >= trials[u]):
            raise SeparationError(
                f"intercept column {problem.labels[u]!r} has no events "
                f"(or no non-events); its coefficient diverges"
            )

    if init is None:
        pbar = np.clip(events / np.maximum(trials, 1e-300), 1e-6, 1.0 - 1e-6)
        if problem.link == LOGIT:
            start = np.log(pbar / (1.0 - pbar))
        else:
            start = np.log(-np.log1p(-pbar))
        coef = np.concatenate([start, np.zeros(problem.n_covariates)])
    else:
        coef = np.asarray(init, dtype=float).copy()
        if coef.shape != (k + problem.n_covariates,):
            raise ValueError("init has wrong length")

    ll = binary_weighted_loglik(problem, coef)
    if not np.isfinite(ll):
        raise SeparationError("objective not finite at the starting point")
    ll_start = ll

    for it in range(1, max_iter + 1):
        eta = problem.linear_predictor(coef)
        first, _ = binary_eta_derivatives(eta, y, problem.link)
        score_cell = w * first
        score = _assemble_rhs(x, score_cell)
        if np.max(np.abs(score)) < tol:
            assert ll >= ll_start - 1e-12 * (abs(ll_start) + 1.0)
            return BinaryFit(intercepts=coef[:k], slopes=coef[k:], n_iter=it - 1)
        info_cell = w * _fisher_weight(eta, problem.link)
        gram = _assemble_gram(x, info_cell)
        if it == 1:
            _check_rank(gram, problem.labels)
        try:
            step = np.linalg.solve(gram, score)
        except np.linalg.LinAlgError:
            _check_rank(gram, problem.labels)
            raise
        scale = 1.0
        for _ in range(40):
            trial = coef + scale * step
            ll_new = binary_weighted_loglik(problem, trial)
            if ll_new >= ll - 1e-12 * (abs(ll) + 1.0):
                break
            scale *= 0.5
        else:
            raise SeparationError("step halving found no ascent direction")
        coef = trial
        ll = ll_new
        if np.max(np.abs(coef)) > 1e3:
            raise SeparationError(
                "coefficients diverged; data are (quasi-)separated"
            )
    raise SeparationError(f"no convergence in {max_iter} iterations")


# ---------------------------------------------------------------------------
# M-step problem builders


def build_channel_problem(
    stacked, row_weights: np.ndarray, channel: int, spec: ModelSpec, labels=()
) -> StateWeightedGlm:
    """Weighted GLM for one outcome channel over all observed rows."""
    ch = spec.channels[channel]
    return StateWeightedGlm(
        covariates=stacked.channel_covariates[channel],
        response=stacked.outcomes[:, channel],
        weights=row_weights,
        family=ch.family,
        link=ch.link,
        labels=tuple(labels),
    )


def build_hazard_problem(
    stacked, row_weights: np.ndarray, spec: ModelSpec, labels=()
) -> StateWeightedGlm:
    """Weighted bernoulli problem for the drop-out hazard.

    Rows at the design horizon are omitted (their hazard is one by design and
    carries no information); the response is the exit indicator.  Under a
    shared intercept the state copies are design-identical, so the weights
    collapse by summation and the problem has a single intercept column.
    """
    keep = stacked.occasion < stacked.horizon
    weights = row_weights[keep]
    if spec.share_gamma:
        weights = weights.sum(axis=1, keepdims=True)
    return StateWeightedGlm(
        covariates=stacked.hazard_covariates[keep],
        response=stacked.is_exit_row[keep].astype(float),
        weights=weights,
        family=BERNOULLI,
        link=spec.hazard_link,
        labels=tuple(labels),
    )


def fit_weighted_hazard(
    stacked,
    row_weights: np.ndarray,
    spec: ModelSpec,
    init: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> BinaryFit:
    """Fit the hazard subproblem; returns intercept(s) and slope estimates."""
    problem = build_hazard_problem(stacked, row_weights, spec)
    return fit_weighted_bernoulli(problem, init=init, tol=tol, max_iter=max_iter)
