"""Estimator facade with the scikit-learn fit/predict calling convention.

``X`` is a :class:`~lmdrop.data.PanelDataset` rather than a rectangular
matrix; panels with per-subject lengths do not fit the (n_samples,
n_features) mould, but the surrounding conventions (constructor stores
hyperparameters verbatim, fitted attributes get a trailing underscore,
``get_params``/``set_params`` work for grid search) are kept.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import PanelDataset
from .em import EmConfig, multistart_fit
from .exceptions import DomainError, SingularInformationError
from .inference import bic, oakes_information
from .model import BERNOULLI, GAUSSIAN, ChannelSpec, ModelSpec
from .recursions import posteriors as subject_posteriors


def infer_families(data: PanelDataset) -> tuple[str, ...]:
    """Guess a family per channel: exactly binary columns become bernoulli."""
    fams = []
    for h in range(data.n_channels):
        vals = np.concatenate([rec.outcomes[:, h] for rec in data.subjects])
        binary = np.all((vals == 0.0) | (vals == 1.0))
        fams.append(BERNOULLI if binary else GAUSSIAN)
    return tuple(fams)


class LatentMarkovDropout(BaseEstimator):
    """Latent Markov model of longitudinal outcomes with informative drop-out.

    Parameters
    ----------
    n_states:
        Number of latent states.
    families:
        Family per channel ("gaussian" or "bernoulli"); None infers binary
        channels from the data.
    hazard_link:
        "logit" or "cloglog" for the drop-out hazard.
    share_gamma:
        Force one hazard intercept across states (the non-informative null).
    tol, tol_score, max_iter, n_random_starts, perturbation_scale:
        Stopping rule and multistart knobs, passed through to the fitter.
    compute_se:
        Compute the observed information after fitting; on failure the
        estimator still fits and records the error in ``se_error_``.
    random_state:
        Seed for the random restarts.
    """

    def __init__(
        self,
        n_states: int = 2,
        families: tuple[str, ...] | None = None,
        hazard_link: str = "logit",
        share_gamma: bool = False,
        tol: float = 1e-8,
        tol_score: float | None = None,
        max_iter: int = 1000,
        n_random_starts: int = 9,
        perturbation_scale: float = 0.5,
        compute_se: bool = True,
        fd_step: float = 1e-5,
        random_state: int = 0,
        n_jobs: int = 1,
    ):
        self.n_states = n_states
        self.families = families
        self.hazard_link = hazard_link
        self.share_gamma = share_gamma
        self.tol = tol
        self.tol_score = tol_score
        self.max_iter = max_iter
        self.n_random_starts = n_random_starts
        self.perturbation_scale = perturbation_scale
        self.compute_se = compute_se
        self.fd_step = fd_step
        self.random_state = random_state
        self.n_jobs = n_jobs

    # ------------------------------------------------------------------

    def _build_spec(self, data: PanelDataset) -> ModelSpec:
        fams = self.families if self.families is not None else infer_families(data)
        if len(fams) != data.n_channels:
            raise DomainError(
                f"families lists {len(fams)} channels, data has {data.n_channels}"
            )
        channels = tuple(
            ChannelSpec(family=f, n_covariates=rec.shape[1])
            for f, rec in zip(fams, data.subjects[0].channel_covariates)
        )
        return ModelSpec(
            n_states=self.n_states,
            channels=channels,
            n_hazard_covariates=data.subjects[0].hazard_covariates.shape[1],
            hazard_link=self.hazard_link,
            share_gamma=self.share_gamma,
        )

    def _em_config(self) -> EmConfig:
        return EmConfig(
            tol_loglik=self.tol,
            tol_score=self.tol_score,
            max_iter=self.max_iter,
            n_random_starts=self.n_random_starts,
            perturbation_scale=self.perturbation_scale,
            seed=self.random_state,
            n_jobs=self.n_jobs,
        )

    def fit(self, X: PanelDataset, y=None):
        """Fit by multistart EM; ``y`` is ignored (sklearn signature)."""
        spec = self._build_spec(X)
        result = multistart_fit(X, spec, self._em_config())
        self.spec_ = spec
        self.result_ = result
        self.params_ = result.params
        self.loglik_ = result.loglik
        self.n_iter_ = result.n_iter
        self.bic_ = bic(result.loglik, spec, X.n)
        self.information_ = None
        self.se_error_ = None
        if self.compute_se:
            try:
                self.information_ = oakes_information(
                    X, result.params, spec, fd_step=self.fd_step,
                    names=X.report_names(),
                )
            except SingularInformationError as err:
                self.information_ = err.result
                self.se_error_ = str(err)
        return self

    # ------------------------------------------------------------------

    def score(self, X: PanelDataset, y=None) -> float:
        """Total observed-data log-likelihood of ``X`` under the fit."""
        check_is_fitted(self, "params_")
        from .recursions import total_loglik

        return total_loglik(X, self.params_, self.spec_)

    def predict_proba(self, X: PanelDataset) -> list[np.ndarray]:
        """Smoothed state-membership probabilities, one (t_i, k) per subject."""
        check_is_fitted(self, "params_")
        return [
            subject_posteriors(rec, self.params_, self.spec_, X.horizon).state_marginals
            for rec in X.subjects
        ]

    def predict(self, X: PanelDataset) -> list[np.ndarray]:
        """Posterior-mode state label per occasion, one int array per subject."""
        return [np.argmax(p, axis=1) for p in self.predict_proba(X)]
