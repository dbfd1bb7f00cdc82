"""Shared builders for randomised model instances and panels.

Most tests draw a structure (state count, channel mix, lengths) and then fill
in numeric values from a seeded generator, so failures replay exactly.
"""

import numpy as np
import pytest

from lmdrop import (
    ChannelSpec,
    ModelSpec,
    ParamSet,
    PanelDataset,
    SimConfig,
    BinaryCovariate,
    TimePolynomial,
    UniformCovariate,
)
from lmdrop.data import SubjectRecord
from lmdrop.model import BERNOULLI, GAUSSIAN


def make_spec(
    k=2,
    families=(GAUSSIAN, BERNOULLI),
    p=(1, 1),
    q=1,
    hazard_link="logit",
    share_gamma=False,
) -> ModelSpec:
    channels = tuple(
        ChannelSpec(family=f, n_covariates=ph) for f, ph in zip(families, p)
    )
    return ModelSpec(
        n_states=k,
        channels=channels,
        n_hazard_covariates=q,
        hazard_link=hazard_link,
        share_gamma=share_gamma,
    )


def random_params(spec: ModelSpec, rng, separation=1.5) -> ParamSet:
    """Valid random parameters; states separated in every intercept."""
    k = spec.k
    init = rng.dirichlet(np.full(k, 4.0))
    trans = rng.dirichlet(np.full(k, 2.0), size=k) + 2.0 * np.eye(k)
    trans /= trans.sum(axis=1, keepdims=True)
    offsets = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    intercepts = rng.normal(0.0, 0.5, size=(spec.r, 1)) + separation * offsets
    slopes = tuple(
        rng.normal(0.0, 0.5, size=ch.n_covariates) for ch in spec.channels
    )
    sigma2 = np.where(
        [ch.family == GAUSSIAN for ch in spec.channels],
        np.exp(rng.normal(0.0, 0.3, size=spec.r)),
        np.nan,
    )
    gamma = -2.0 + rng.normal(0.0, 0.4, size=spec.n_gamma)
    if spec.n_gamma > 1:
        gamma = gamma + 0.5 * offsets
    delta = rng.normal(0.0, 0.3, size=spec.q)
    return ParamSet(
        init_probs=init,
        trans=trans,
        intercepts=intercepts,
        slopes=slopes,
        sigma2=sigma2,
        hazard_intercepts=gamma,
        hazard_slopes=delta,
    )


def random_record(spec: ModelSpec, rng, t: int, subject_id="s1") -> SubjectRecord:
    """Arbitrary observed data of length ``t`` (not drawn from the model)."""
    outcomes = np.empty((t, spec.r))
    for h, ch in enumerate(spec.channels):
        if ch.family == GAUSSIAN:
            outcomes[:, h] = rng.normal(0.0, 1.5, size=t)
        else:
            outcomes[:, h] = rng.integers(0, 2, size=t).astype(float)
    chan_cov = tuple(
        rng.normal(0.0, 1.0, size=(t, ch.n_covariates)) for ch in spec.channels
    )
    haz_cov = rng.normal(0.0, 1.0, size=(t, spec.q))
    return SubjectRecord(
        subject_id=subject_id,
        outcomes=outcomes,
        channel_covariates=chan_cov,
        hazard_covariates=haz_cov,
    )


def random_dataset(spec: ModelSpec, rng, n: int, horizon: int) -> PanelDataset:
    """Panel of arbitrary records with a mix of early exits and completers."""
    subjects = []
    for i in range(n):
        t = horizon if i % 3 == 0 else int(rng.integers(1, horizon + 1))
        subjects.append(random_record(spec, rng, t, subject_id=f"s{i + 1:04d}"))
    return PanelDataset(
        horizon=horizon,
        subjects=tuple(subjects),
        channel_names=tuple(f"y{h + 1}" for h in range(spec.r)),
        channel_covariate_names=tuple(
            tuple(f"y{h + 1}x{j + 1}" for j in range(ch.n_covariates))
            for h, ch in enumerate(spec.channels)
        ),
        hazard_covariate_names=tuple(f"z{j + 1}" for j in range(spec.q)),
    )


def two_state_config(
    n_subjects=150, horizon=8, seed=11, share_gamma=False, hazard_link="logit"
) -> SimConfig:
    """Canonical well-separated two-state generator used across suites."""
    spec = make_spec(k=2, share_gamma=share_gamma, hazard_link=hazard_link)
    params = ParamSet(
        init_probs=[0.6, 0.4],
        trans=[[0.85, 0.15], [0.1, 0.9]],
        intercepts=[[-1.0, 1.5], [0.5, -0.8]],
        slopes=(np.array([0.4]), np.array([-0.3])),
        sigma2=[0.8, np.nan],
        hazard_intercepts=[-2.5] if share_gamma else [-2.5, -1.2],
        hazard_slopes=[0.3],
    )
    return SimConfig(
        spec=spec,
        params=params,
        n_subjects=n_subjects,
        horizon=horizon,
        covariates={
            "x": UniformCovariate(-1.0, 1.0),
            "z": BinaryCovariate(0.5),
            "t": TimePolynomial(degree=1, scale=0.1),
        },
        channel_covariates=(("x",), ("x",)),
        hazard_covariates=("z",),
        seed=seed,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20250819)
