"""Latent Markov models for multivariate longitudinal outcomes whose
drop-out process may depend on the hidden state.

The public surface: describe a model (:class:`ModelSpec`,
:class:`ChannelSpec`, :class:`ParamSet`), load or simulate panel data
(:func:`load_panel`, :func:`simulate`), fit by multistart EM
(:func:`multistart_fit` or the scikit-learn style
:class:`LatentMarkovDropout`), then query fits (:func:`oakes_information`,
:func:`bic`, :func:`lr_test_dropout`).
"""

from . import exceptions
from .data import (
    CenteringReport,
    ChannelColumns,
    DropoutSummary,
    PanelDataset,
    PanelSchema,
    SubjectRecord,
    center_continuous,
    dropout_summary,
    load_panel,
    validate_panel,
    write_panel,
)
from .em import EmConfig, FitResult, deterministic_init, em_fit, multistart_fit
from .estimator import LatentMarkovDropout, infer_families
from .exceptions import LmdropError
from .inference import (
    InformationResult,
    TestReport,
    WaldRow,
    bic,
    expected_score,
    lr_test_dropout,
    numerical_information,
    oakes_information,
    q_function,
    wald_table,
)
from .model import (
    BERNOULLI,
    CLOGLOG,
    GAUSSIAN,
    LOGIT,
    ChannelSpec,
    ModelSpec,
    ParamSet,
    ReportNames,
    duration_logprob,
    hazard_probability,
    num_params,
    order_states,
    pack_params,
    reported_params,
    unpack_params,
)
from .recursions import (
    BackwardTable,
    ForwardTable,
    Posteriors,
    backward,
    forward,
    posteriors,
    smoothed_posteriors,
    subject_loglik,
    total_loglik,
)
from .simulate import (
    BinaryCovariate,
    ConstantCovariate,
    RecoveryStudy,
    SimConfig,
    TimePolynomial,
    TruthRecord,
    UniformCovariate,
    recovery_study,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "BERNOULLI",
    "BackwardTable",
    "BinaryCovariate",
    "CLOGLOG",
    "CenteringReport",
    "ChannelColumns",
    "ChannelSpec",
    "ConstantCovariate",
    "DropoutSummary",
    "EmConfig",
    "FitResult",
    "ForwardTable",
    "GAUSSIAN",
    "InformationResult",
    "LOGIT",
    "LatentMarkovDropout",
    "LmdropError",
    "ModelSpec",
    "PanelDataset",
    "PanelSchema",
    "ParamSet",
    "Posteriors",
    "RecoveryStudy",
    "ReportNames",
    "SimConfig",
    "SubjectRecord",
    "TestReport",
    "TimePolynomial",
    "TruthRecord",
    "UniformCovariate",
    "WaldRow",
    "backward",
    "bic",
    "center_continuous",
    "deterministic_init",
    "dropout_summary",
    "duration_logprob",
    "em_fit",
    "exceptions",
    "expected_score",
    "forward",
    "hazard_probability",
    "infer_families",
    "load_panel",
    "lr_test_dropout",
    "multistart_fit",
    "num_params",
    "numerical_information",
    "oakes_information",
    "order_states",
    "pack_params",
    "posteriors",
    "q_function",
    "recovery_study",
    "reported_params",
    "simulate",
    "smoothed_posteriors",
    "subject_loglik",
    "total_loglik",
    "unpack_params",
    "validate_panel",
    "wald_table",
    "write_panel",
    "__version__",
]
