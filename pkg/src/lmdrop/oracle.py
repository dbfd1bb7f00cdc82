"""Brute-force reference implementations.

These enumerate every latent path explicitly and therefore cost ``k**t_i``
per subject.  They exist to validate the recursions and the information
matrix on small instances; the fitting engine never calls them.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .data import PanelDataset, SubjectRecord
from .exceptions import ExplosionError
from .model import (
    ModelSpec,
    ParamSet,
    emission_logprob_matrix,
    hazard_logprob_matrix,
    num_params,
    pack_params,
    unpack_params,
)
from .recursions import Posteriors, total_loglik

PATH_BUDGET = 10**7


def _enumerate_paths(k: int, t: int) -> np.ndarray:
    """All latent paths as a ``(k**t, t)`` array; guarded by PATH_BUDGET."""
    count = k**t
    if count > PATH_BUDGET:
        raise ExplosionError(
            f"{k}**{t} = {count} latent paths exceeds the budget of {PATH_BUDGET}"
        )
    grids = np.indices((k,) * t).reshape(t, count)
    return grids.T


def _path_logprobs(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
):
    """Joint log-probability of (outcomes, exit occasion, path) per path."""
    t = record.n_occasions
    paths = _enumerate_paths(spec.k, t)
    emis = emission_logprob_matrix(
        params, spec, record.outcomes, record.channel_covariates
    )
    log_p, log_1mp = hazard_logprob_matrix(
        params, spec, record.hazard_covariates, np.arange(1, t + 1), horizon
    )
    with np.errstate(divide="ignore"):
        log_init = np.log(params.init_probs)
        log_trans = np.log(params.trans)
    lp = log_init[paths[:, 0]].astype(float)
    for d in range(1, t):
        lp = lp + log_trans[paths[:, d - 1], paths[:, d]]
    for d in range(t):
        lp = lp + emis[d, paths[:, d]]
        if d < t - 1:
            lp = lp + log_1mp[d, paths[:, d]]
        else:
            lp = lp + log_p[d, paths[:, d]]
    return paths, lp


def brute_loglik(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> float:
    """Subject log-likelihood by summing over all ``k**t_i`` latent paths."""
    _, lp = _path_logprobs(record, params, spec, horizon)
    return float(logsumexp(lp))


def brute_posteriors(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> Posteriors:
    """Smoothed posteriors by explicit enumeration."""
    t, k = record.n_occasions, spec.k
    paths, lp = _path_logprobs(record, params, spec, horizon)
    weights = np.exp(lp - logsumexp(lp))
    state_marg = np.zeros((t, k))
    for d in range(t):
        np.add.at(state_marg[d], paths[:, d], weights)
    if t == 1:
        return Posteriors(state_marginals=state_marg, pair_marginals=None)
    pair_marg = np.zeros((t - 1, k, k))
    for d in range(1, t):
        np.add.at(pair_marg[d - 1], (paths[:, d - 1], paths[:, d]), weights)
    return Posteriors(state_marginals=state_marg, pair_marginals=pair_marg)


def brute_observed_hessian(
    data: PanelDataset, params: ParamSet, spec: ModelSpec, step: float = 1e-5
) -> np.ndarray:
    """Central-difference Hessian of the total log-likelihood.

    Differentiates :func:`~lmdrop.recursions.total_loglik` in the packed
    (unconstrained) coordinates; per-coordinate step ``step * (|x_j| + 1)``.
    The negative of the result estimates the observed information.
    """
    x0 = pack_params(params, spec)
    m = num_params(spec)
    h = step * (np.abs(x0) + 1.0)

    def f(x: np.ndarray) -> float:
        return total_loglik(data, unpack_params(x, spec), spec)

    f0 = f(x0)
    hess = np.empty((m, m))
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = h[i]
        hess[i, i] = (f(x0 + ei) - 2.0 * f0 + f(x0 - ei)) / h[i] ** 2
        for j in range(i + 1, m):
            ej = np.zeros(m)
            ej[j] = h[j]
            cross = (
                f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = cross
            hess[j, i] = cross
    return hess
