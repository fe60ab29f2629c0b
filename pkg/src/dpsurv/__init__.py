"""Evidential survival analysis on feature-vector inputs.

The pipeline: per-slide Gaussian-mixture embeddings over patch features
(gmm), prototype-based evidence mapping each mixture component to a Gaussian
random fuzzy number (evidence, grfn), a mixture evidential loss with
gradient training (training), IPCW survival metrics and interval calibration
(metrics), file formats and synthetic cohorts (data_io), and a command-line
pipeline (cli).
"""

from .grfn import (
    GRFN,
    Interval,
    MixtureGRFN,
    UnattainableLevelError,
    VacuousCombinationError,
    bel_halfline,
    bel_interval,
    bpi,
    combine,
    contour,
    mixture_bel,
    mixture_pl,
    pl_halfline,
    pl_interval,
    ppi,
)
from .gmm import (
    GMMParams,
    PatchPrototypes,
    SlideEmbedding,
    assignment_map,
    em_fit,
    fit_patch_prototypes,
    log_likelihood,
    slide_embedding,
)
from .evidence import (
    ComponentPrototype,
    DegenerateEmbeddingError,
    PrototypeBank,
    component_evidence,
    prototype_evidence,
    pst,
    relative_risk,
    risk_score,
    similarity,
    slide_evidence,
    summarizing_grfn,
    survival_function,
)
from .training import (
    BinGrid,
    SurvivalRecord,
    TrainConfig,
    grad_check,
    init_bank,
    mixture_evidential_loss,
    nll_subject,
    nll_uncensored,
    quantile_bins,
    train,
)
from .metrics import (
    CoverageResult,
    PredictionSet,
    StepFunction,
    UndefinedMetricError,
    bll,
    brier_score,
    c_index,
    calibration_coverage,
    ibll,
    ibs,
    km_censoring,
)
from .data_io import (
    CohortManifest,
    SynthSpec,
    generate_synthetic,
    load_model,
    read_embedding,
    read_manifest,
    save_model,
    write_embedding,
)

__version__ = "0.1.0"
