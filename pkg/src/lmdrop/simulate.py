"""Data generation from a fully specified model, plus a recovery harness.

Sampling is vectorised across subjects: the full latent chain is drawn on an
(n, horizon) grid, outcomes and drop-out indicators are drawn on the same
grid, and each subject's records are then truncated at the sampled exit
occasion.  Draw order is fixed (covariates, chain, channels, drop-out), so a
seed pins the dataset exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PanelDataset, SubjectRecord
from .exceptions import DomainError, SchemaError, ShapeError
from .model import (
    GAUSSIAN,
    ModelSpec,
    ParamSet,
    hazard_inverse_link,
    pack_params,
)

# ---------------------------------------------------------------------------
# covariate generators


@dataclass(frozen=True)
class ConstantCovariate:
    """Same value for every subject and occasion."""

    value: float = 1.0

    def draw(self, rng, n_subjects: int, horizon: int) -> np.ndarray:
        return np.full((n_subjects, horizon), float(self.value))


@dataclass(frozen=True)
class UniformCovariate:
    """Uniform(low, high), drawn once per subject, constant over time."""

    low: float = 0.0
    high: float = 1.0

    def draw(self, rng, n_subjects: int, horizon: int) -> np.ndarray:
        if not self.high > self.low:
            raise DomainError("UniformCovariate requires high > low")
        vals = rng.uniform(self.low, self.high, size=n_subjects)
        return np.repeat(vals[:, None], horizon, axis=1)


@dataclass(frozen=True)
class BinaryCovariate:
    """Bernoulli(p), drawn once per subject, constant over time."""

    p: float = 0.5

    def draw(self, rng, n_subjects: int, horizon: int) -> np.ndarray:
        if not 0.0 <= self.p <= 1.0:
            raise DomainError("BinaryCovariate requires p in [0, 1]")
        vals = (rng.random(n_subjects) < self.p).astype(float)
        return np.repeat(vals[:, None], horizon, axis=1)


@dataclass(frozen=True)
class TimePolynomial:
    """Deterministic function of the occasion index: scale * t ** degree."""

    degree: int = 1
    scale: float = 1.0

    def draw(self, rng, n_subjects: int, horizon: int) -> np.ndarray:
        t = np.arange(1, horizon + 1, dtype=float)
        row = self.scale * t**self.degree
        return np.repeat(row[None, :], n_subjects, axis=0)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to draw one panel.

    ``covariates`` maps a name to a generator; ``channel_covariates`` (one
    name tuple per channel) and ``hazard_covariates`` select from those names
    in design order.  Arities must match ``spec``.
    """

    spec: ModelSpec
    params: ParamSet
    n_subjects: int
    horizon: int
    covariates: dict[str, object] = field(default_factory=dict)
    channel_covariates: tuple[tuple[str, ...], ...] = ()
    hazard_covariates: tuple[str, ...] = ()
    channel_names: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise DomainError("n_subjects must be >= 1")
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        chan_cov = self.channel_covariates or tuple(() for _ in self.spec.channels)
        object.__setattr__(self, "channel_covariates", tuple(map(tuple, chan_cov)))
        object.__setattr__(self, "hazard_covariates", tuple(self.hazard_covariates))
        if len(self.channel_covariates) != self.spec.r:
            raise ShapeError("channel_covariates must list one tuple per channel")
        for h, names in enumerate(self.channel_covariates):
            if len(names) != self.spec.channels[h].n_covariates:
                raise ShapeError(f"channel {h} expects "
                                 f"{self.spec.channels[h].n_covariates} covariates")
        if len(self.hazard_covariates) != self.spec.q:
            raise ShapeError(f"hazard design expects {self.spec.q} covariates")
        for name in itertools.chain(*self.channel_covariates, self.hazard_covariates):
            if name not in self.covariates:
                raise SchemaError(f"covariate {name!r} has no generator")
        self.params.validate(self.spec)


@dataclass(frozen=True)
class TruthRecord:
    """Ground truth kept out of the dataset: full latent paths on the
    (n, horizon) grid and the sampled exit occasion per subject."""

    paths: np.ndarray
    exit_occasions: np.ndarray
    seed: int | None


# ---------------------------------------------------------------------------
# sampling


def _sample_categorical(rng, probs: np.ndarray) -> np.ndarray:
    # probs (n, k) rows on the simplex; inverse-CDF per row
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def simulate(config: SimConfig, rng=None) -> tuple[PanelDataset, TruthRecord]:
    """Draw one panel; returns the dataset and the ground-truth record."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
        seed_used: int | None = config.seed
    else:
        seed_used = None
    spec, params = config.spec, config.params
    n, s, k = config.n_subjects, config.horizon, spec.k

    grids = {name: gen.draw(rng, n, s) for name, gen in config.covariates.items()}
    for name, grid in grids.items():
        if grid.shape != (n, s):
            raise ShapeError(f"generator for {name!r} returned shape {grid.shape}")

    paths = np.empty((n, s), dtype=int)
    paths[:, 0] = _sample_categorical(rng, np.repeat(params.init_probs[None, :], n, 0))
    for t in range(1, s):
        paths[:, t] = _sample_categorical(rng, params.trans[paths[:, t - 1]])

    outcomes = np.empty((n, s, spec.r))
    for h, ch in enumerate(spec.channels):
        design = np.stack(
            [grids[name] for name in config.channel_covariates[h]], axis=2
        ) if config.channel_covariates[h] else np.zeros((n, s, 0))
        eta = params.intercepts[h][paths] + design @ params.slopes[h]
        if ch.family == GAUSSIAN:
            outcomes[:, :, h] = eta + rng.standard_normal((n, s)) * np.sqrt(
                params.sigma2[h]
            )
        else:
            p = 1.0 / (1.0 + np.exp(-eta))
            outcomes[:, :, h] = (rng.random((n, s)) < p).astype(float)

    hazard_design = np.stack(
        [grids[name] for name in config.hazard_covariates], axis=2
    ) if config.hazard_covariates else np.zeros((n, s, 0))
    gamma = params.gamma_by_state(k)
    eta_drop = gamma[paths] + hazard_design @ params.hazard_slopes
    p_drop = hazard_inverse_link(eta_drop, spec.hazard_link)
    p_drop[:, s - 1] = 1.0  # exit certain at the horizon
    exited = rng.random((n, s)) < p_drop
    exited[:, s - 1] = True
    exit_occasions = np.argmax(exited, axis=1) + 1

    subjects = []
    width = max(4, len(str(n)))
    for i in range(n):
        t_i = int(exit_occasions[i])
        chan_cov = tuple(
            np.stack([grids[name][i, :t_i] for name in names], axis=1)
            if names else np.zeros((t_i, 0))
            for names in config.channel_covariates
        )
        haz_cov = (
            np.stack([grids[name][i, :t_i] for name in config.hazard_covariates], axis=1)
            if config.hazard_covariates else np.zeros((t_i, 0))
        )
        subjects.append(
            SubjectRecord(
                subject_id=f"s{i + 1:0{width}d}",
                outcomes=outcomes[i, :t_i, :].copy(),
                channel_covariates=chan_cov,
                hazard_covariates=haz_cov,
            )
        )
    data = PanelDataset(
        horizon=s,
        subjects=tuple(subjects),
        channel_names=config.channel_names
        or tuple(f"y{h + 1}" for h in range(spec.r)),
        channel_covariate_names=config.channel_covariates,
        hazard_covariate_names=config.hazard_covariates,
    )
    truth = TruthRecord(paths=paths, exit_occasions=exit_occasions, seed=seed_used)
    return data, truth


# ---------------------------------------------------------------------------
# recovery harness


def _align_to_fit(truth: ParamSet, fitted: ParamSet, spec: ModelSpec) -> ParamSet:
    """Permute the truth's states to best match the fitted intercepts.

    Slopes are state-free, so only intercept columns drive the match; the
    permutation minimising total absolute intercept distance wins.
    """
    k = spec.k
    best, best_cost = truth, np.inf
    for perm in itertools.permutations(range(k)):
        candidate = truth.permute_states(list(perm))
        cost = float(np.abs(candidate.intercepts - fitted.intercepts).sum())
        if cost < best_cost:
            best, best_cost = candidate, cost
    return best


def _coverage_indices(spec: ModelSpec) -> np.ndarray:
    """Packed indices of the regression targets: channel slopes plus the full
    hazard block (intercepts and slopes)."""
    from .inference import packed_layout

    layout = packed_layout(spec)
    idx: list[int] = []
    for h, sl in enumerate(layout.channel_coefs):
        start = sl.start + spec.k
        idx.extend(range(start, sl.stop))
    idx.extend(range(layout.hazard.start, layout.hazard.stop))
    return np.asarray(idx, dtype=int)


@dataclass(frozen=True)
class RecoveryRep:
    seed_index: int
    loglik: float
    n_within: int
    n_checked: int
    se_available: bool
    chosen_k: int | None
    errors: tuple[float, ...]       # |estimate - truth| / SE per checked coord
    deviations: tuple[float, ...]   # estimate - truth per checked coord
    failed: str | None = None


@dataclass(frozen=True)
class RecoveryStudy:
    """Aggregate of a repeated simulate-and-refit experiment."""

    reps: tuple[RecoveryRep, ...]
    coverage: float
    n_within: int
    n_checked: int
    bic_counts: dict[int, int]
    bic_correct: float
    bias: np.ndarray                # mean deviation per checked coordinate
    rmse: np.ndarray
    coordinate_labels: tuple[str, ...]


def recovery_study(
    config: SimConfig,
    n_reps: int,
    em_config=None,
    k_candidates: tuple[int, ...] = (),
    fd_step: float = 1e-5,
    se_multiple: float = 3.0,
) -> RecoveryStudy:
    """Repeatedly simulate from ``config`` and refit.

    Checks whether each regression coordinate of the truth falls within
    ``se_multiple`` standard errors of the estimate, and (optionally) how
    often the subject-count BIC picks the true state count among
    ``k_candidates``.
    """
    from .exceptions import LmdropError
    from .model import packed_labels

    if n_reps < 1:
        raise DomainError("n_reps must be >= 1")
    spec = config.spec
    idx = _coverage_indices(spec)
    labels = tuple(np.asarray(packed_labels(spec), dtype=object)[idx])
    children = np.random.SeedSequence(config.seed).spawn(n_reps)
    reps = []
    bic_counts: dict[int, int] = {kk: 0 for kk in k_candidates}
    for i in range(n_reps):
        data, _ = simulate(config, rng=np.random.default_rng(children[i]))
        try:
            rep = _one_recovery_rep(
                data, config, i, idx, em_config, k_candidates, fd_step,
                se_multiple, bic_counts,
            )
        except LmdropError as err:
            # replication failures are recorded, never fatal for the study
            rep = RecoveryRep(
                seed_index=i, loglik=float("nan"), n_within=0, n_checked=0,
                se_available=False, chosen_k=None, errors=(), deviations=(),
                failed=f"{type(err).__name__}: {err}",
            )
        reps.append(rep)
    n_checked = sum(r.n_checked for r in reps)
    n_within = sum(r.n_within for r in reps)
    coverage = n_within / n_checked if n_checked else float("nan")
    n_scored = sum(1 for r in reps if r.chosen_k is not None)
    bic_correct = (
        bic_counts.get(spec.k, 0) / n_scored if n_scored else float("nan")
    )
    dev_rows = np.asarray([r.deviations for r in reps if r.deviations])
    if dev_rows.size:
        bias = dev_rows.mean(axis=0)
        rmse = np.sqrt((dev_rows**2).mean(axis=0))
    else:
        bias = np.full(len(idx), np.nan)
        rmse = np.full(len(idx), np.nan)
    return RecoveryStudy(
        reps=tuple(reps),
        coverage=coverage,
        n_within=n_within,
        n_checked=n_checked,
        bic_counts=bic_counts,
        bic_correct=bic_correct,
        bias=bias,
        rmse=rmse,
        coordinate_labels=labels,
    )


def _one_recovery_rep(
    data, config, i, idx, em_config, k_candidates, fd_step, se_multiple, bic_counts
) -> RecoveryRep:
    from .em import multistart_fit
    from .exceptions import SingularInformationError
    from .inference import bic, oakes_information

    spec = config.spec
    fit = multistart_fit(data, spec, em_config)
    truth = _align_to_fit(config.params, fit.params, spec)
    x_true = pack_params(truth, spec)
    x_hat = pack_params(fit.params, spec)
    deviations = tuple(float(d) for d in (x_hat[idx] - x_true[idx]))
    n_within = 0
    se_ok = True
    errors: tuple[float, ...] = ()
    try:
        info = oakes_information(data, fit.params, spec, fd_step=fd_step)
    except SingularInformationError:
        se_ok = False
    else:
        err = np.abs(x_hat[idx] - x_true[idx]) / info.se_packed[idx]
        n_within = int(np.sum(err <= se_multiple))
        errors = tuple(float(e) for e in err)
    chosen: int | None = None
    if k_candidates:
        scores = {}
        for kk in k_candidates:
            spec_k = replace(spec, n_states=kk)
            fit_k = fit if kk == spec.k else multistart_fit(data, spec_k, em_config)
            scores[kk] = bic(fit_k.loglik, spec_k, data.n)
        chosen = min(scores, key=lambda kk: (scores[kk], kk))
        bic_counts[chosen] += 1
    return RecoveryRep(
        seed_index=i,
        loglik=fit.loglik,
        n_within=n_within,
        n_checked=len(idx) if se_ok else 0,
        se_available=se_ok,
        chosen_k=chosen,
        errors=errors,
        deviations=deviations,
    )
