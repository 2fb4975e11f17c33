"""Bayesian multinomial probit regression with unified skew-normal posteriors."""
from .errors import (
    SunProbitError,
    NotFactorizable,
    DimensionMismatch,
    DimensionTooLarge,
    CapExceeded,
    InfeasibleRegion,
    ToleranceNotMet,
    MaxTriesExceeded,
    IndexOutOfRange,
    QOverCap,
    ConfigError,
    DataError,
    MalformedCsv,
    UnknownLabel,
    NonNumericPredictor,
)
from .gauss import CdfResult, CdfSettings, SpdMatrix, chol_psd, mvn_cdf, sample_mvn, tmvn_moments
from .models import (
    Dataset,
    Family,
    ModelSpec,
    ProbitLikelihood,
    build_likelihood,
    class_log_probs,
    likelihood_eval,
    predict_frequencies,
    simulate_labels,
)
from .sun import (
    SunParams,
    log_evidence,
    marginal_subset,
    posterior_update,
    predict_exact,
    predict_from_posterior,
    sample_posterior,
    skew_normal,
    sun_log_density,
    sun_moments,
)
from .tilting import sample_tmvn
from .vb import (
    augmented_form,
    cavi_mf,
    cavi_pfm,
    default_blocking,
    kl_mf,
    kl_zbar,
    predict_vb,
    sample_vb,
    singleton_blocking,
    vb_moments,
)

__version__ = "0.1.0"

__all__ = [
    "CapExceeded",
    "CdfResult",
    "CdfSettings",
    "ConfigError",
    "DataError",
    "Dataset",
    "DimensionMismatch",
    "DimensionTooLarge",
    "Family",
    "IndexOutOfRange",
    "InfeasibleRegion",
    "MalformedCsv",
    "MaxTriesExceeded",
    "ModelSpec",
    "NonNumericPredictor",
    "NotFactorizable",
    "ProbitLikelihood",
    "QOverCap",
    "SpdMatrix",
    "SunParams",
    "SunProbitError",
    "ToleranceNotMet",
    "UnknownLabel",
    "augmented_form",
    "build_likelihood",
    "cavi_mf",
    "cavi_pfm",
    "chol_psd",
    "class_log_probs",
    "default_blocking",
    "kl_mf",
    "kl_zbar",
    "likelihood_eval",
    "log_evidence",
    "marginal_subset",
    "mvn_cdf",
    "posterior_update",
    "predict_exact",
    "predict_frequencies",
    "predict_from_posterior",
    "predict_vb",
    "sample_mvn",
    "sample_posterior",
    "sample_tmvn",
    "sample_vb",
    "simulate_labels",
    "singleton_blocking",
    "skew_normal",
    "sun_log_density",
    "sun_moments",
    "tmvn_moments",
    "vb_moments",
]
