"""EM fitting engine: E-step, M-step, deterministic and multistart fitting."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import PanelDataset, validate_panel
from .exceptions import (
    DegenerateStateError,
    DomainError,
    FitError,
    LmdropError,
    MonotonicityError,
    RankError,
    SeparationError,
)
from .glm import (
    StateWeightedGlm,
    build_channel_problem,
    build_hazard_problem,
    fit_weighted_bernoulli,
    fit_weighted_gaussian,
)
from .model import (
    GAUSSIAN,
    ModelSpec,
    ParamSet,
    num_params,
    order_states,
    pack_params,
    unpack_params,
)
from .recursions import Posteriors, smoothed_posteriors

# a latent state whose total expected occupancy falls under this aborts the start
OCCUPANCY_FLOOR = 1e-8
# a log-likelihood drop beyond this between EM iterations indicates a bug
MONOTONICITY_SLACK = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Tuning of the EM optimiser.

    ``tol_loglik`` is relative: convergence requires
    ``|delta loglik| / (|loglik| + 1) < tol_loglik``.  When ``tol_score`` is
    set, convergence additionally requires the max-norm of the expected-score
    vector to fall under it, which drives the iterate much closer to the
    stationary point than the log-likelihood test alone can.
    """

    tol_loglik: float = 1e-8
    max_iter: int = 1000
    n_random_starts: int = 9
    perturbation_scale: float = 0.5
    seed: int = 0
    tol_score: float | None = None
    inner_tol: float = 1e-10
    inner_max_iter: int = 100
    n_jobs: int = 1

    def __post_init__(self):
        if self.tol_loglik <= 0 or self.inner_tol <= 0:
            raise DomainError("tolerances must be positive")
        if self.max_iter < 1 or self.inner_max_iter < 1:
            raise DomainError("iteration caps must be >= 1")
        if self.n_random_starts < 0:
            raise DomainError("n_random_starts must be >= 0")
        if self.perturbation_scale < 0:
            raise DomainError("perturbation_scale must be >= 0")


@dataclass(frozen=True)
class FitResult:
    """Outcome of one EM run (or of the winning start of a multistart)."""

    params: ParamSet
    loglik: float
    spec: ModelSpec
    converged: bool
    n_iter: int
    trace: np.ndarray                       # log-likelihood after each E-step
    start_index: int = 0
    start_logliks: tuple[float, ...] = ()
    seed: int | None = None
    failure: str | None = None              # set when the run was aborted

    @property
    def n_params(self) -> int:
        return num_params(self.spec)


# ---------------------------------------------------------------------------
# E and M steps


def e_step(
    data: PanelDataset, params: ParamSet, spec: ModelSpec
) -> tuple[list[Posteriors], float]:
    """Smoothed posteriors for every subject plus the total log-likelihood."""
    return smoothed_posteriors(data, params, spec)


def stack_state_marginals(posteriors: list[Posteriors]) -> np.ndarray:
    """Row-aligned state posterior weights ``(total rows, k)``."""
    return np.concatenate([p.state_marginals for p in posteriors])


def state_occupancy(posteriors: list[Posteriors]) -> np.ndarray:
    """Total expected visits per state."""
    return stack_state_marginals(posteriors).sum(axis=0)


def m_step_latent(
    posteriors: list[Posteriors], previous_trans: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Closed-form update of the initial law and the transition matrix.

    The transition update divides pooled pair posteriors by pooled lagged
    state posteriors; when no subject has a second occasion the update is
    undefined and ``previous_trans`` is returned unchanged (or None).

    Raises
    ------
    DegenerateStateError
        When a state has (numerically) no expected visits before the final
        occasions, making a transition row undefined.
    """
    first = np.stack([p.state_marginals[0] for p in posteriors])
    init_probs = first.mean(axis=0)
    init_probs = init_probs / init_probs.sum()
    k = init_probs.shape[0]
    numer = np.zeros((k, k))
    denom = np.zeros(k)
    any_pairs = False
    for p in posteriors:
        if p.pair_marginals is None:
            continue
        any_pairs = True
        numer += p.pair_marginals.sum(axis=0)
        denom += p.state_marginals[:-1].sum(axis=0)
    if not any_pairs:
        return init_probs, previous_trans
    bad = np.flatnonzero(denom < 1e-12)
    if bad.size:
        raise DegenerateStateError(
            f"state {int(bad[0]) + 1} has no expected visits before exit occasions",
            state=int(bad[0]),
        )
    trans = numer / denom[:, None]
    trans = trans / trans.sum(axis=1, keepdims=True)
    return init_probs, trans


def m_step(
    data: PanelDataset,
    posteriors: list[Posteriors],
    params: ParamSet,
    spec: ModelSpec,
    config: EmConfig,
) -> ParamSet:
    """Full M-step: latent laws, channel regressions, hazard regression.

    Channel and hazard subproblems are warm-started at the current
    parameters, which keeps the inner Newton loops short late in the EM run.
    """
    stacked = data.stacked
    weights = stack_state_marginals(posteriors)
    init_probs, trans = m_step_latent(posteriors, previous_trans=params.trans)
    if trans is None:
        trans = params.trans

    k, r = spec.k, spec.r
    intercepts = np.empty((r, k))
    slopes = []
    sigma2 = np.full(r, np.nan)
    for h, ch in enumerate(spec.channels):
        problem = build_channel_problem(stacked, weights, h, spec)
        if ch.family == GAUSSIAN:
            fit = fit_weighted_gaussian(problem)
            sigma2[h] = fit.sigma2
        else:
            warm = np.concatenate([params.intercepts[h], params.slopes[h]])
            fit = fit_weighted_bernoulli(
                problem, init=warm, tol=config.inner_tol, max_iter=config.inner_max_iter
            )
        intercepts[h] = fit.intercepts
        slopes.append(fit.slopes)

    warm = np.concatenate([params.hazard_intercepts, params.hazard_slopes])
    hazard_problem = build_hazard_problem(stacked, weights, spec)
    hazard_fit = fit_weighted_bernoulli(
        hazard_problem, init=warm, tol=config.inner_tol, max_iter=config.inner_max_iter
    )
    return ParamSet(
        init_probs=init_probs,
        trans=trans,
        intercepts=intercepts,
        slopes=tuple(slopes),
        sigma2=sigma2,
        hazard_intercepts=hazard_fit.intercepts,
        hazard_slopes=hazard_fit.slopes,
    )


# ---------------------------------------------------------------------------
# initialisation


def _pooled_start(problem: StateWeightedGlm):
    """Pooled (single-state) fit and the standard deviation of its residuals."""
    if problem.family == GAUSSIAN:
        fit = fit_weighted_gaussian(problem)
        spread = float(np.sqrt(fit.sigma2))
        return fit, spread
    fit = fit_weighted_bernoulli(problem)
    eta = problem.linear_predictor(fit.coef)[:, 0]
    p = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
    if problem.link == "cloglog":
        p = -np.expm1(-np.exp(np.clip(eta, -500, 500)))
    spread = float(np.std(problem.response - p))
    return fit, spread


def deterministic_init(data: PanelDataset, spec: ModelSpec) -> ParamSet:
    """Data-driven starting point built from pooled one-state fits.

    Slopes come from pooled regressions ignoring the states; state intercepts
    are the pooled intercept plus equally spaced offsets spanning plus/minus
    one pooled residual standard deviation; the initial law is uniform; the
    transition matrix puts ``1 / (k (k - 1))`` on each off-diagonal entry.
    For ``k == 1`` the start is exactly the pooled solution.
    """
    stacked = data.stacked
    k, r = spec.k, spec.r
    offsets = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    ones = np.ones((stacked.outcomes.shape[0], 1))

    intercepts = np.empty((r, k))
    slopes = []
    sigma2 = np.full(r, np.nan)
    for h, ch in enumerate(spec.channels):
        pooled_spec = ModelSpec(
            n_states=1,
            channels=spec.channels,
            n_hazard_covariates=spec.q,
            hazard_link=spec.hazard_link,
        )
        problem = build_channel_problem(stacked, ones, h, pooled_spec)
        fit, spread = _pooled_start(problem)
        intercepts[h] = fit.intercepts[0] + spread * offsets
        slopes.append(fit.slopes)
        if ch.family == GAUSSIAN:
            sigma2[h] = fit.sigma2

    pooled_spec = ModelSpec(
        n_states=1,
        channels=spec.channels,
        n_hazard_covariates=spec.q,
        hazard_link=spec.hazard_link,
    )
    hazard_problem = build_hazard_problem(stacked, ones, pooled_spec)
    hazard_fit, hazard_spread = _pooled_start(hazard_problem)
    if spec.share_gamma:
        gamma = np.array([hazard_fit.intercepts[0]])
    else:
        gamma = hazard_fit.intercepts[0] + hazard_spread * offsets

    init_probs = np.full(k, 1.0 / k)
    if k > 1:
        off = 1.0 / (k * (k - 1))
        trans = np.full((k, k), off)
        np.fill_diagonal(trans, 1.0 - (k - 1) * off)
    else:
        trans = np.ones((1, 1))
    return ParamSet(
        init_probs=init_probs,
        trans=trans,
        intercepts=intercepts,
        slopes=tuple(slopes),
        sigma2=sigma2,
        hazard_intercepts=gamma,
        hazard_slopes=hazard_fit.slopes,
    )


# ---------------------------------------------------------------------------
# EM driver


def em_fit(
    data: PanelDataset,
    spec: ModelSpec,
    config: EmConfig | None = None,
    init: ParamSet | None = None,
) -> FitResult:
    """Run EM to convergence from one starting point.

    Convergence requires the relative log-likelihood change to fall under
    ``config.tol_loglik`` (and, if set, the expected-score max-norm under
    ``config.tol_score``).  The log-likelihood trace is monotone up to
    ``MONOTONICITY_SLACK``; a larger drop raises :class:`MonotonicityError`.
    A state losing essentially all expected occupancy aborts the run, which
    is returned non-converged with ``failure`` set.  The returned parameters
    are state-ordered by the first channel's intercepts.
    """
    from .inference import expected_score  # local import to avoid a cycle

    config = config or EmConfig()
    validate_panel(data, spec)
    params = init if init is not None else deterministic_init(data, spec)
    params.validate(spec)

    posteriors, loglik = e_step(data, params, spec)
    trace = [loglik]
    converged = False
    failure = None
    for _ in range(config.max_iter):
        occupancy = state_occupancy(posteriors)
        low = np.flatnonzero(occupancy < OCCUPANCY_FLOOR)
        if low.size:
            failure = (
                f"state {int(low[0]) + 1} expected occupancy "
                f"{occupancy[low[0]]:.2e} under {OCCUPANCY_FLOOR:.0e}"
            )
            break
        try:
            params_new = m_step(data, posteriors, params, spec, config)
        except (DegenerateStateError, RankError, SeparationError) as err:
            # typical when a state collapses under an overspecified k: keep
            # the last coherent iterate and report the run as failed
            failure = f"{type(err).__name__}: {err}"
            break
        posteriors_new, loglik_new = e_step(data, params_new, spec)
        if loglik_new < loglik - MONOTONICITY_SLACK:
            raise MonotonicityError(
                f"log-likelihood fell from {loglik:.10f} to {loglik_new:.10f}"
            )
        trace.append(loglik_new)
        rel_change = abs(loglik_new - loglik) / (abs(loglik_new) + 1.0)
        params, posteriors, loglik = params_new, posteriors_new, loglik_new
        if rel_change < config.tol_loglik:
            if config.tol_score is not None:
                score = expected_score(data, posteriors, params, spec)
                if np.max(np.abs(score)) >= config.tol_score:
                    continue
            converged = True
            break

    return FitResult(
        params=order_states(params, spec),
        loglik=loglik,
        spec=spec,
        converged=converged and failure is None,
        n_iter=len(trace) - 1,
        trace=np.asarray(trace),
        seed=config.seed,
        failure=failure,
    )


def _perturbed_inits(
    base: ParamSet, spec: ModelSpec, config: EmConfig
) -> list[ParamSet]:
    """Multiplicative gaussian noise on the packed coordinates of ``base``."""
    packed = pack_params(base, spec)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_random_starts)
    inits = []
    for child in seeds:
        rng = np.random.default_rng(child)
        noise = rng.standard_normal(packed.shape[0])
        inits.append(
            unpack_params(packed * (1.0 + config.perturbation_scale * noise), spec)
        )
    return inits


def _safe_em(data, spec, config, init, index):
    try:
        return em_fit(data, spec, config, init=init), None
    except MonotonicityError:
        raise
    except LmdropError as err:
        return None, f"start {index}: {type(err).__name__}: {err}"


def multistart_fit(
    data: PanelDataset,
    spec: ModelSpec,
    config: EmConfig | None = None,
    extra_inits: tuple[ParamSet, ...] = (),
) -> FitResult:
    """Deterministic start plus seeded random perturbations; best fit wins.

    Start 0 is the deterministic initialisation; starts ``1..n_random_starts``
    perturb the packed coordinates of the deterministic start's *solution*
    multiplicatively with seeded gaussian noise; ``extra_inits`` run last.
    The winner has the highest final log-likelihood (ties go to the earliest
    start), so the result is reproducible for a fixed seed regardless of
    ``n_jobs``.

    Raises :class:`FitError` when every start fails.
    """
    config = config or EmConfig()
    det_init = deterministic_init(data, spec)
    first, first_error = _safe_em(data, spec, config, det_init, 0)

    base = first.params if first is not None else det_init
    inits: list[ParamSet] = _perturbed_inits(base, spec, config)
    inits += list(extra_inits)

    rest: list[tuple[FitResult | None, str | None]]
    if config.n_jobs != 1 and inits:
        from joblib import Parallel, delayed

        rest = Parallel(n_jobs=config.n_jobs)(
            delayed(_safe_em)(data, spec, config, ini, j + 1)
            for j, ini in enumerate(inits)
        )
    else:
        rest = [
            _safe_em(data, spec, config, ini, j + 1) for j, ini in enumerate(inits)
        ]

    results = [(first, first_error)] + list(rest)
    logliks = tuple(
        float(fit.loglik) if fit is not None else float("nan") for fit, _ in results
    )
    best_index = -1
    best_loglik = -np.inf
    for j, (fit, _) in enumerate(results):
        if fit is not None and fit.loglik > best_loglik:
            best_index, best_loglik = j, fit.loglik
    if best_index < 0:
        errors = "; ".join(err for _, err in results if err is not None)
        raise FitError(f"every start failed: {errors}")
    winner = results[best_index][0]
    return replace(winner, start_index=best_index, start_logliks=logliks)
