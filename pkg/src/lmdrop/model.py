"""Model family for multivariate longitudinal outcomes with informative drop-out.

A hidden homogeneous Markov chain with ``k`` states drives ``r`` outcome
channels (gaussian/identity or bernoulli/logit) and a discrete-time drop-out
hazard.  Follow-up stops with probability one at the design horizon ``s``, so
the number of observed occasions ``t_i`` follows a truncated-geometric-type
law conditional on the latent path.

This module knows nothing about estimation: it defines the parameter
container, per-observation log-densities, the hazard and duration laws, the
parameter count used by information criteria, and the bijective mapping
between constrained parameters and the unconstrained coordinates used by the
optimiser and by finite differencing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, ShapeError

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
IDENTITY = "identity"
LOGIT = "logit"
CLOGLOG = "cloglog"

_DEFAULT_LINK = {GAUSSIAN: IDENTITY, BERNOULLI: LOGIT}
_ALLOWED_LINKS = {GAUSSIAN: (IDENTITY,), BERNOULLI: (LOGIT,)}
_HAZARD_LINKS = (LOGIT, CLOGLOG)

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)
_SIMPLEX_TOL = 1e-10


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class ChannelSpec:
    """One outcome channel: distribution family, link, covariate arity."""

    family: str
    n_covariates: int
    link: str | None = None

    def __post_init__(self):
        if self.family not in _DEFAULT_LINK:
            raise DomainError(f"unknown channel family {self.family!r}")
        if self.link is None:
            object.__setattr__(self, "link", _DEFAULT_LINK[self.family])
        if self.link not in _ALLOWED_LINKS[self.family]:
            raise DomainError(
                f"link {self.link!r} not supported for family {self.family!r}"
            )
        if self.n_covariates < 0:
            raise DomainError("n_covariates must be nonnegative")


@dataclass(frozen=True)
class ModelSpec:
    """Dimensional description of one model: states, channels, hazard design.

    Parameters
    ----------
    n_states:
        Number of latent states, ``k >= 1``.
    channels:
        One :class:`ChannelSpec` per outcome channel, in channel order.
    n_hazard_covariates:
        Arity ``q`` of the drop-out hazard design (excluding intercepts).
    hazard_link:
        ``"logit"`` (default) or ``"cloglog"``.
    share_gamma:
        If True, a single hazard intercept is shared across states (the
        non-informative-drop-out null within the same likelihood).
    """

    n_states: int
    channels: tuple[ChannelSpec, ...]
    n_hazard_covariates: int
    hazard_link: str = LOGIT
    share_gamma: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.n_states < 1:
            raise DomainError("n_states must be >= 1")
        if not self.channels:
            raise DomainError("at least one outcome channel is required")
        if self.n_hazard_covariates < 0:
            raise DomainError("n_hazard_covariates must be nonnegative")
        if self.hazard_link not in _HAZARD_LINKS:
            raise DomainError(f"unknown hazard link {self.hazard_link!r}")

    @property
    def k(self) -> int:
        return self.n_states

    @property
    def r(self) -> int:
        return len(self.channels)

    @property
    def q(self) -> int:
        return self.n_hazard_covariates

    @property
    def n_gamma(self) -> int:
        return 1 if self.share_gamma else self.n_states

    @property
    def gaussian_channels(self) -> tuple[int, ...]:
        return tuple(
            h for h, ch in enumerate(self.channels) if ch.family == GAUSSIAN
        )


@dataclass(frozen=True)
class ReportNames:
    """Optional human labels for channels and covariates (reporting only)."""

    channel_names: tuple[str, ...]
    channel_covariate_names: tuple[tuple[str, ...], ...]
    hazard_covariate_names: tuple[str, ...]


def default_names(spec: ModelSpec) -> ReportNames:
    return ReportNames(
        channel_names=tuple(f"y{h + 1}" for h in range(spec.r)),
        channel_covariate_names=tuple(
            tuple(f"y{h + 1}.x{j + 1}" for j in range(ch.n_covariates))
            for h, ch in enumerate(spec.channels)
        ),
        hazard_covariate_names=tuple(f"z{j + 1}" for j in range(spec.q)),
    )


# ---------------------------------------------------------------------------
# parameters


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParamSet:
    """Complete parameter vector of one model, in natural (constrained) form.

    Arrays are defensively copied and marked read-only; instances are safe to
    share across threads.

    Attributes
    ----------
    init_probs:
        Initial state distribution, shape ``(k,)``.
    trans:
        Transition matrix, shape ``(k, k)``, rows on the simplex.
    intercepts:
        State-specific outcome intercepts, shape ``(r, k)``.
    slopes:
        Per-channel regression coefficients, one ``(p_h,)`` array per channel.
    sigma2:
        Per-channel dispersion, shape ``(r,)``; entries for non-gaussian
        channels are NaN and never read.
    hazard_intercepts:
        State-specific hazard intercepts, shape ``(k,)``, or ``(1,)`` when the
        model shares a single intercept across states.
    hazard_slopes:
        Hazard regression coefficients, shape ``(q,)``.
    """

    init_probs: np.ndarray
    trans: np.ndarray
    intercepts: np.ndarray
    slopes: tuple[np.ndarray, ...]
    sigma2: np.ndarray
    hazard_intercepts: np.ndarray
    hazard_slopes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "init_probs", _readonly(self.init_probs))
        object.__setattr__(self, "trans", _readonly(self.trans))
        object.__setattr__(self, "intercepts", np.atleast_2d(_readonly(self.intercepts)))
        object.__setattr__(self, "slopes", tuple(_readonly(b) for b in self.slopes))
        object.__setattr__(self, "sigma2", np.atleast_1d(_readonly(self.sigma2)))
        object.__setattr__(
            self, "hazard_intercepts", np.atleast_1d(_readonly(self.hazard_intercepts))
        )
        object.__setattr__(self, "hazard_slopes", _readonly(self.hazard_slopes))

    # -- helpers ------------------------------------------------------------

    def gamma_by_state(self, k: int) -> np.ndarray:
        """Hazard intercept per state, broadcasting a shared intercept."""
        g = self.hazard_intercepts
        if g.shape == (k,):
            return g
        if g.shape == (1,):
            return np.broadcast_to(g, (k,))
        raise ShapeError(f"hazard_intercepts has shape {g.shape}, expected ({k},) or (1,)")

    def permute_states(self, perm) -> "ParamSet":
        """Relabel states by ``perm``: new state u is old state perm[u]."""
        perm = np.asarray(perm, dtype=int)
        gamma = self.hazard_intercepts
        if gamma.shape[0] == perm.shape[0]:
            gamma = gamma[perm]
        return ParamSet(
            init_probs=self.init_probs[perm],
            trans=self.trans[np.ix_(perm, perm)],
            intercepts=self.intercepts[:, perm],
            slopes=self.slopes,
            sigma2=self.sigma2,
            hazard_intercepts=gamma,
            hazard_slopes=self.hazard_slopes,
        )

    def validate(self, spec: ModelSpec) -> None:
        """Check shapes, simplex constraints, and dispersion positivity."""
        k, r, q = spec.k, spec.r, spec.q
        if self.init_probs.shape != (k,):
            raise ShapeError(f"init_probs shape {self.init_probs.shape}, expected ({k},)")
        if self.trans.shape != (k, k):
            raise ShapeError(f"trans shape {self.trans.shape}, expected ({k}, {k})")
        if self.intercepts.shape != (r, k):
            raise ShapeError(
                f"intercepts shape {self.intercepts.shape}, expected ({r}, {k})"
            )
        if len(self.slopes) != r:
            raise ShapeError(f"{len(self.slopes)} slope vectors, expected {r}")
        for h, ch in enumerate(spec.channels):
            if self.slopes[h].shape != (ch.n_covariates,):
                raise ShapeError(
                    f"channel {h} slopes shape {self.slopes[h].shape}, "
                    f"expected ({ch.n_covariates},)"
                )
        if self.sigma2.shape != (r,):
            raise ShapeError(f"sigma2 shape {self.sigma2.shape}, expected ({r},)")
        if self.hazard_intercepts.shape != (spec.n_gamma,):
            raise ShapeError(
                f"hazard_intercepts shape {self.hazard_intercepts.shape}, "
                f"expected ({spec.n_gamma},)"
            )
        if self.hazard_slopes.shape != (q,):
            raise ShapeError(
                f"hazard_slopes shape {self.hazard_slopes.shape}, expected ({q},)"
            )
        for name, arr in (
            ("init_probs", self.init_probs),
            ("trans", self.trans),
            ("intercepts", self.intercepts),
            ("hazard_intercepts", self.hazard_intercepts),
            ("hazard_slopes", self.hazard_slopes),
        ):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} contains non-finite values")
        for b in self.slopes:
            if not np.all(np.isfinite(b)):
                raise DomainError("slopes contain non-finite values")
        if np.any(self.init_probs < 0) or abs(self.init_probs.sum() - 1.0) > _SIMPLEX_TOL:
            raise DomainError("init_probs is not a probability vector")
        if np.any(self.trans < 0) or np.any(
            np.abs(self.trans.sum(axis=1) - 1.0) > _SIMPLEX_TOL
        ):
            raise DomainError("trans rows are not probability vectors")
        for h in spec.gaussian_channels:
            v = self.sigma2[h]
            if not np.isfinite(v) or v <= 0:
                raise DomainError(f"sigma2[{h}] must be finite and > 0")


# ---------------------------------------------------------------------------
# links and stable log-terms


def _log1mexp(x: np.ndarray) -> np.ndarray:
    # log(1 - exp(-x)) for x >= 0, stable at both ends
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        small = np.log(-np.expm1(-np.minimum(x, _LOG_2)))
        large = np.log1p(-np.exp(-np.maximum(x, _LOG_2)))
    return np.where(x < _LOG_2, small, large)


def hazard_logterms(eta, link: str):
    """Return ``(log p, log(1 - p))`` for hazard linear predictor ``eta``."""
    eta = np.asarray(eta, dtype=float)
    if link == LOGIT:
        log_p = -np.logaddexp(0.0, -eta)
        log_1mp = -np.logaddexp(0.0, eta)
    elif link == CLOGLOG:
        ex = np.exp(eta)
        log_1mp = -ex
        log_p = _log1mexp(ex)
    else:
        raise DomainError(f"unknown hazard link {link!r}")
    return log_p, log_1mp


def hazard_inverse_link(eta, link: str):
    """Hazard probability for linear predictor ``eta`` under ``link``."""
    eta = np.asarray(eta, dtype=float)
    if link == LOGIT:
        out = np.empty_like(eta)
        pos = eta >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
        e = np.exp(eta[~pos])
        out[~pos] = e / (1.0 + e)
        return out
    if link == CLOGLOG:
        return -np.expm1(-np.exp(eta))
    raise DomainError(f"unknown hazard link {link!r}")


# ---------------------------------------------------------------------------
# hazard and duration law


def hazard_probability(
    params: ParamSet,
    spec: ModelSpec,
    state: int,
    occasion: int,
    hazard_covariates,
    horizon: int,
) -> float:
    """Drop-out probability at ``occasion`` in ``state``.

    Occasions are 1-based.  At ``occasion == horizon`` the probability is one
    exactly, regardless of parameters: follow-up surely ends at the design
    horizon.
    """
    if not 1 <= occasion <= horizon:
        raise ShapeError(f"occasion {occasion} outside 1..{horizon}")
    if occasion == horizon:
        return 1.0
    z = np.asarray(hazard_covariates, dtype=float)
    if z.shape != (spec.q,):
        raise ShapeError(f"hazard covariates shape {z.shape}, expected ({spec.q},)")
    gamma = params.gamma_by_state(spec.k)[state]
    eta = gamma + float(z @ params.hazard_slopes)
    return float(hazard_inverse_link(eta, spec.hazard_link))


def duration_logprob(
    params: ParamSet,
    spec: ModelSpec,
    states,
    hazard_covariates,
    horizon: int,
) -> float:
    """Log-probability of exiting exactly after ``len(states)`` occasions.

    ``states`` is the latent path over the observed occasions (0-based state
    labels); ``hazard_covariates`` has one row per observed occasion.  The
    terminal factor is the hazard at the exit occasion, except at the horizon
    where it is one (contributing zero).
    """
    states = np.asarray(states, dtype=int)
    t_obs = states.shape[0]
    if not 1 <= t_obs <= horizon:
        raise ShapeError(f"path length {t_obs} outside 1..{horizon}")
    z = np.asarray(hazard_covariates, dtype=float).reshape(t_obs, spec.q)
    gamma = params.gamma_by_state(spec.k)[states]
    eta = gamma + z @ params.hazard_slopes
    log_p, log_1mp = hazard_logterms(eta, spec.hazard_link)
    total = float(log_1mp[:-1].sum()) if t_obs > 1 else 0.0
    if t_obs < horizon:
        total += float(log_p[-1])
    return total


# ---------------------------------------------------------------------------
# outcome channels


def channel_logdensity(
    params: ParamSet,
    spec: ModelSpec,
    channel: int,
    y: float,
    state: int,
    covariates,
) -> float:
    """Log-density of one outcome value in one state."""
    ch = spec.channels[channel]
    x = np.asarray(covariates, dtype=float)
    if x.shape != (ch.n_covariates,):
        raise ShapeError(
            f"channel {channel} covariates shape {x.shape}, "
            f"expected ({ch.n_covariates},)"
        )
    eta = params.intercepts[channel, state] + float(x @ params.slopes[channel])
    if ch.family == GAUSSIAN:
        s2 = float(params.sigma2[channel])
        if not s2 > 0:
            raise DomainError(f"sigma2[{channel}] must be > 0")
        return -0.5 * (_LOG_2PI + math.log(s2)) - (y - eta) ** 2 / (2.0 * s2)
    if y not in (0.0, 1.0):
        raise DomainError(f"bernoulli outcome must be 0 or 1, got {y!r}")
    return y * eta - float(np.logaddexp(0.0, eta))


def emission_logprob_matrix(params: ParamSet, spec: ModelSpec, outcomes, channel_covariates):
    """Per-row, per-state total outcome log-density.

    ``outcomes`` is ``(rows, r)``; ``channel_covariates`` one ``(rows, p_h)``
    array per channel.  Returns ``(rows, k)`` with entries
    ``sum_h log f_h(y[row, h] | state)``.
    """
    outcomes = np.asarray(outcomes, dtype=float)
    rows = outcomes.shape[0]
    out = np.zeros((rows, spec.k))
    for h, ch in enumerate(spec.channels):
        x = np.asarray(channel_covariates[h], dtype=float).reshape(rows, ch.n_covariates)
        eta = x @ params.slopes[h]
        eta = eta[:, None] + params.intercepts[h][None, :]
        y = outcomes[:, h][:, None]
        if ch.family == GAUSSIAN:
            s2 = float(params.sigma2[h])
            out += -0.5 * (_LOG_2PI + math.log(s2)) - (y - eta) ** 2 / (2.0 * s2)
        else:
            out += y * eta - np.logaddexp(0.0, eta)
    return out


def hazard_logprob_matrix(
    params: ParamSet, spec: ModelSpec, hazard_covariates, occasions, horizon: int
):
    """Per-row, per-state hazard log-terms ``(log p, log(1 - p))``.

    Rows at ``occasion == horizon`` get ``log p = 0`` and ``log(1-p) = -inf``
    exactly; the parameters are irrelevant there by construction.
    """
    z = np.asarray(hazard_covariates, dtype=float)
    occasions = np.asarray(occasions, dtype=int)
    rows = occasions.shape[0]
    gamma = params.gamma_by_state(spec.k)
    eta = (z.reshape(rows, spec.q) @ params.hazard_slopes)[:, None] + gamma[None, :]
    log_p, log_1mp = hazard_logterms(eta, spec.hazard_link)
    final = occasions == horizon
    log_p[final] = 0.0
    log_1mp[final] = -np.inf
    return log_p, log_1mp


# ---------------------------------------------------------------------------
# parameter counting and packing


def num_params(spec: ModelSpec) -> int:
    """Number of free parameters: ``(k-1)`` initial probabilities,
    ``k(k-1)`` transition probabilities, ``k + p_h`` per channel, one
    dispersion per gaussian channel, ``k`` (or one shared) hazard intercepts,
    and ``q`` hazard slopes."""
    k = spec.k
    total = (k - 1) + k * (k - 1)
    for ch in spec.channels:
        total += k + ch.n_covariates
    total += len(spec.gaussian_channels)
    total += spec.n_gamma + spec.q
    return total


def _simplex_to_logits(p: np.ndarray) -> np.ndarray:
    # log-ratio against the first state; requires interior point
    with np.errstate(divide="ignore"):
        return np.log(p[1:]) - np.log(p[0])


def _logits_to_simplex(c: np.ndarray) -> np.ndarray:
    full = np.concatenate(([0.0], c))
    full = full - full.max()
    e = np.exp(full)
    return e / e.sum()


def pack_params(params: ParamSet, spec: ModelSpec) -> np.ndarray:
    """Map a :class:`ParamSet` to unconstrained coordinates.

    Layout: initial-state logits, transition logits row by row, then per
    channel intercepts and slopes, then log-dispersions of gaussian channels,
    then hazard intercepts and slopes.  Length equals :func:`num_params`.
    Inverse of :func:`unpack_params` for interior parameters.
    """
    params.validate(spec)
    k = spec.k
    parts: list[np.ndarray] = []
    if k > 1:
        parts.append(_simplex_to_logits(params.init_probs))
        for u in range(k):
            parts.append(_simplex_to_logits(params.trans[u]))
    for h in range(spec.r):
        parts.append(params.intercepts[h])
        parts.append(params.slopes[h])
    for h in spec.gaussian_channels:
        parts.append(np.log(params.sigma2[h : h + 1]))
    parts.append(params.hazard_intercepts)
    parts.append(params.hazard_slopes)
    return np.concatenate(parts) if parts else np.empty(0)


def unpack_params(vec, spec: ModelSpec) -> ParamSet:
    """Inverse of :func:`pack_params`; always yields valid simplex rows."""
    vec = np.asarray(vec, dtype=float)
    m = num_params(spec)
    if vec.shape != (m,):
        raise ShapeError(f"packed vector shape {vec.shape}, expected ({m},)")
    k, r = spec.k, spec.r
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        out = vec[pos : pos + n]
        pos += n
        return out

    if k > 1:
        init_probs = _logits_to_simplex(take(k - 1))
        trans = np.vstack([_logits_to_simplex(take(k - 1)) for _ in range(k)])
    else:
        init_probs = np.ones(1)
        trans = np.ones((1, 1))
    intercepts = np.empty((r, k))
    slopes = []
    for h, ch in enumerate(spec.channels):
        intercepts[h] = take(k)
        slopes.append(take(ch.n_covariates).copy())
    sigma2 = np.full(r, np.nan)
    for h in spec.gaussian_channels:
        sigma2[h] = math.exp(take(1)[0])
    gamma = take(spec.n_gamma).copy()
    delta = take(spec.q).copy()
    return ParamSet(
        init_probs=init_probs,
        trans=trans,
        intercepts=intercepts,
        slopes=tuple(slopes),
        sigma2=sigma2,
        hazard_intercepts=gamma,
        hazard_slopes=delta,
    )


def packed_labels(spec: ModelSpec, names: ReportNames | None = None) -> list[str]:
    """Human labels for each packed coordinate, in pack order."""
    if names is None:
        names = default_names(spec)
    k = spec.k
    labels: list[str] = []
    if k > 1:
        labels += [f"init.logit[{u + 1}]" for u in range(1, k)]
        for u in range(k):
            labels += [f"trans.logit[{u + 1},{v + 1}]" for v in range(1, k)]
    for h, ch in enumerate(spec.channels):
        cn = names.channel_names[h]
        labels += [f"{cn}.intercept[{u + 1}]" for u in range(k)]
        labels += [f"{cn}.{c}" for c in names.channel_covariate_names[h]]
    for h in spec.gaussian_channels:
        labels.append(f"{names.channel_names[h]}.log_sigma2")
    if spec.share_gamma:
        labels.append("hazard.intercept")
    else:
        labels += [f"hazard.intercept[{u + 1}]" for u in range(k)]
    labels += [f"hazard.{c}" for c in names.hazard_covariate_names]
    return labels


# ---------------------------------------------------------------------------
# reporting basis and state ordering


@dataclass(frozen=True)
class ReportedParams:
    """Parameters in reporting form: state-averaged intercepts plus
    deviations, raw slopes and dispersions, and the latent-chain laws."""

    mean_intercepts: np.ndarray            # (r,)
    intercept_deviations: np.ndarray       # (r, k), each row sums to 0
    slopes: tuple[np.ndarray, ...]
    sigma2: np.ndarray
    mean_hazard_intercept: float
    hazard_intercept_deviations: np.ndarray  # (k,) sums to 0; zeros when shared
    hazard_slopes: np.ndarray
    init_probs: np.ndarray
    trans: np.ndarray


def reported_params(params: ParamSet, spec: ModelSpec) -> ReportedParams:
    k = spec.k
    mean_a = params.intercepts.mean(axis=1)
    dev_a = params.intercepts - mean_a[:, None]
    gamma = params.gamma_by_state(k)
    mean_g = float(gamma.mean())
    dev_g = np.zeros(k) if spec.share_gamma else gamma - mean_g
    return ReportedParams(
        mean_intercepts=mean_a,
        intercept_deviations=dev_a,
        slopes=params.slopes,
        sigma2=params.sigma2,
        mean_hazard_intercept=mean_g,
        hazard_intercept_deviations=dev_g,
        hazard_slopes=params.hazard_slopes,
        init_probs=params.init_probs,
        trans=params.trans,
    )


def order_states(params: ParamSet, spec: ModelSpec) -> ParamSet:
    """Relabel states so first-channel intercepts increase with the label.

    Fixes the label-switching ambiguity; a no-op for ``k == 1`` or already
    ordered parameters.
    """
    perm = np.argsort(params.intercepts[0], kind="stable")
    if np.array_equal(perm, np.arange(spec.k)):
        return params
    return params.permute_states(perm)
