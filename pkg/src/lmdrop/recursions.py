"""Drop-out-aware forward/backward recursions and posterior smoothing.

All recursions run in log space.  The forward pass additionally normalises
each occasion and stores the per-occasion log-normalisers, so the stored rows
are log conditional state distributions and the subject log-likelihood is the
sum of the normalisers.  The drop-out factor enters at the *destination*
state of each step: survival ``1 - p_it(v)`` before the exit occasion, the
hazard ``p_it(v)`` at the exit occasion (which is one exactly at the design
horizon).

The batched functions operate on a :class:`~lmdrop.data.StackedPanel` and
vectorise across subjects; the per-subject functions wrap the same code path
on a one-subject stack, so there is a single implementation to test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import PanelDataset, StackedPanel, SubjectRecord
from .exceptions import NumericalError
from .model import (
    ModelSpec,
    ParamSet,
    emission_logprob_matrix,
    hazard_logprob_matrix,
)


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _stack_one(record: SubjectRecord, horizon: int) -> StackedPanel:
    t = record.n_occasions
    return StackedPanel(
        subject_index=np.zeros(t, dtype=int),
        occasion=np.arange(1, t + 1),
        outcomes=record.outcomes,
        channel_covariates=record.channel_covariates,
        hazard_covariates=record.hazard_covariates,
        offsets=np.array([0, t]),
        lengths=np.array([t]),
        horizon=horizon,
    )


def _log_terms(stacked: StackedPanel, params: ParamSet, spec: ModelSpec):
    """Per-row emission and duration log-factors, each ``(rows, k)``."""
    emis = emission_logprob_matrix(
        params, spec, stacked.outcomes, stacked.channel_covariates
    )
    log_p, log_1mp = hazard_logprob_matrix(
        params, spec, stacked.hazard_covariates, stacked.occasion, stacked.horizon
    )
    haz = np.where(stacked.is_exit_row[:, None], log_p, log_1mp)
    return emis, haz


# ---------------------------------------------------------------------------
# batched passes


def forward_arrays(
    stacked: StackedPanel, params: ParamSet, spec: ModelSpec, terms=None
):
    """Normalised forward tables for every subject.

    Returns ``(log_values, log_normalizers, loglik)`` with shapes
    ``(n, t_max, k)``, ``(n, t_max)``, ``(n,)``.  Cells past a subject's exit
    occasion hold NaN (values) and zero (normalisers).  The raw forward
    variable is ``log_values[i, t] + log_normalizers[i, : t + 1].sum()``.
    """
    emis, haz = _log_terms(stacked, params, spec) if terms is None else terms
    lengths, offsets = stacked.lengths, stacked.offsets
    n, k = stacked.n_subjects, spec.k
    t_max = int(lengths.max())
    log_init = _log(params.init_probs)
    log_trans = _log(params.trans)

    log_values = np.full((n, t_max, k), np.nan)
    log_norms = np.zeros((n, t_max))
    first = offsets[:-1]
    v = log_init[None, :] + emis[first] + haz[first]
    c = logsumexp(v, axis=1)
    log_values[:, 0, :] = v - c[:, None]
    log_norms[:, 0] = c
    for d in range(1, t_max):
        active = np.flatnonzero(lengths > d)
        if active.size == 0:
            break
        rows = offsets[active] + d
        prev = log_values[active, d - 1]
        step = logsumexp(prev[:, :, None] + log_trans[None, :, :], axis=1)
        v = step + emis[rows] + haz[rows]
        c = logsumexp(v, axis=1)
        log_values[active, d] = v - c[:, None]
        log_norms[active, d] = c
    return log_values, log_norms, log_norms.sum(axis=1)


def backward_arrays(
    stacked: StackedPanel, params: ParamSet, spec: ModelSpec, terms=None
):
    """Raw backward tables ``(n, t_max, k)``; one (log zero) at each exit row.

    Entry ``[i, t, u]`` is the log-probability of the future outcomes and the
    observed exit occasion given state ``u`` at occasion ``t + 1`` (0-based
    ``t``), with the drop-out factor taken at the destination state of every
    remaining step.
    """
    emis, haz = _log_terms(stacked, params, spec) if terms is None else terms
    lengths, offsets = stacked.lengths, stacked.offsets
    n, k = stacked.n_subjects, spec.k
    t_max = int(lengths.max())
    log_trans = _log(params.trans)

    log_values = np.full((n, t_max, k), np.nan)
    log_values[np.arange(n), lengths - 1] = 0.0
    for d in range(t_max - 2, -1, -1):
        active = np.flatnonzero(lengths > d + 1)
        if active.size == 0:
            continue
        rows_next = offsets[active] + d + 1
        future = emis[rows_next] + haz[rows_next] + log_values[active, d + 1]
        log_values[active, d] = logsumexp(
            log_trans[None, :, :] + future[:, None, :], axis=2
        )
    return log_values


def posterior_arrays(stacked: StackedPanel, params: ParamSet, spec: ModelSpec):
    """Smoothed state and transition posteriors for every subject.

    Returns ``(state_marg, pair_marg, loglik)``: ``state_marg[i, t]`` is the
    posterior state law at occasion ``t + 1`` (rows sum to one); for
    ``t >= 1``, ``pair_marg[i, t]`` is the posterior law of the state pair at
    occasions ``(t, t + 1)`` (sums to one over both axes).  Unused cells are
    NaN.  Raises :class:`NumericalError` if any subject log-likelihood is not
    finite.
    """
    terms = _log_terms(stacked, params, spec)
    emis, haz = terms
    la, _, loglik = forward_arrays(stacked, params, spec, terms=terms)
    _check_finite_loglik(loglik, stacked)
    lb = backward_arrays(stacked, params, spec, terms=terms)
    lengths, offsets = stacked.lengths, stacked.offsets
    n, k = stacked.n_subjects, spec.k
    t_max = int(lengths.max())
    log_trans = _log(params.trans)

    joint = la + lb
    with np.errstate(invalid="ignore"):
        state_marg = np.exp(joint - logsumexp(joint, axis=2, keepdims=True))
    pair_marg = np.full((n, t_max, k, k), np.nan)
    for d in range(1, t_max):
        active = np.flatnonzero(lengths > d)
        if active.size == 0:
            break
        rows = offsets[active] + d
        dest = emis[rows] + haz[rows] + lb[active, d]
        m = la[active, d - 1][:, :, None] + log_trans[None, :, :] + dest[:, None, :]
        flat = m.reshape(active.size, k * k)
        pair_marg[active, d] = np.exp(
            flat - logsumexp(flat, axis=1, keepdims=True)
        ).reshape(active.size, k, k)
    return state_marg, pair_marg, loglik


def _check_finite_loglik(loglik: np.ndarray, stacked: StackedPanel) -> None:
    bad = np.flatnonzero(~np.isfinite(loglik))
    if bad.size:
        raise NumericalError(
            "non-finite subject log-likelihood", subject_id=str(int(bad[0]))
        )


# ---------------------------------------------------------------------------
# per-subject API


@dataclass(frozen=True)
class ForwardTable:
    """Forward pass of one subject: normalised rows plus log-normalisers."""

    log_values: np.ndarray       # (t_i, k); each row logsumexps to zero
    log_normalizers: np.ndarray  # (t_i,)

    @property
    def log_likelihood(self) -> float:
        return float(self.log_normalizers.sum())

    def raw(self) -> np.ndarray:
        """Unnormalised log forward variables."""
        return self.log_values + np.cumsum(self.log_normalizers)[:, None]


@dataclass(frozen=True)
class BackwardTable:
    """Backward pass of one subject, unnormalised (exit row is log one)."""

    log_values: np.ndarray  # (t_i, k)


@dataclass(frozen=True)
class Posteriors:
    """Smoothed posteriors of one subject.

    ``state_marginals[t]`` is the state law at occasion ``t + 1``;
    ``pair_marginals[t - 1]`` (when ``t_i > 1``) the pair law at occasions
    ``(t, t + 1)``.
    """

    state_marginals: np.ndarray            # (t_i, k)
    pair_marginals: np.ndarray | None      # (t_i - 1, k, k); None when t_i == 1


def forward(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> ForwardTable:
    """Drop-out-aware forward recursion for one subject."""
    stacked = _stack_one(record, horizon)
    la, norms, _ = forward_arrays(stacked, params, spec)
    return ForwardTable(log_values=la[0], log_normalizers=norms[0])


def backward(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> BackwardTable:
    """Drop-out-aware backward recursion for one subject."""
    stacked = _stack_one(record, horizon)
    lb = backward_arrays(stacked, params, spec)
    return BackwardTable(log_values=lb[0])


def subject_loglik(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> float:
    """Marginal log-likelihood of one subject's outcomes and exit occasion."""
    stacked = _stack_one(record, horizon)
    _, _, loglik = forward_arrays(stacked, params, spec)
    value = float(loglik[0])
    if not np.isfinite(value):
        raise NumericalError(
            "non-finite subject log-likelihood", subject_id=record.subject_id
        )
    return value


def posteriors(
    record: SubjectRecord, params: ParamSet, spec: ModelSpec, horizon: int
) -> Posteriors:
    """Smoothed state and pair posteriors for one subject."""
    stacked = _stack_one(record, horizon)
    state_marg, pair_marg, _ = posterior_arrays(stacked, params, spec)
    t = record.n_occasions
    return Posteriors(
        state_marginals=state_marg[0, :t],
        pair_marginals=pair_marg[0, 1:t] if t > 1 else None,
    )


def smoothed_posteriors(
    data: PanelDataset, params: ParamSet, spec: ModelSpec
) -> tuple[list[Posteriors], float]:
    """Posteriors for every subject plus the total log-likelihood.

    The total is accumulated left to right over subjects in dataset order,
    so repeated runs are bitwise identical.
    """
    stacked = data.stacked
    try:
        state_marg, pair_marg, loglik = posterior_arrays(stacked, params, spec)
    except NumericalError as err:
        sid = data.subjects[int(err.subject_id)].subject_id
        raise NumericalError("non-finite subject log-likelihood", subject_id=sid) from None
    out = []
    for i, t in enumerate(stacked.lengths):
        out.append(
            Posteriors(
                state_marginals=state_marg[i, :t],
                pair_marginals=pair_marg[i, 1:t] if t > 1 else None,
            )
        )
    total = 0.0
    for value in loglik:
        total += float(value)
    return out, total


def total_loglik(data: PanelDataset, params: ParamSet, spec: ModelSpec) -> float:
    """Total log-likelihood over subjects, summed left to right.

    Raises :class:`NumericalError` naming the first offending subject if any
    per-subject value is not finite.
    """
    stacked = data.stacked
    _, _, loglik = forward_arrays(stacked, params, spec)
    bad = np.flatnonzero(~np.isfinite(loglik))
    if bad.size:
        sid = data.subjects[int(bad[0])].subject_id
        raise NumericalError("non-finite subject log-likelihood", subject_id=sid)
    total = 0.0
    for value in loglik:
        total += float(value)
    return total
