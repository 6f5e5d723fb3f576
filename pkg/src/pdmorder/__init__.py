"""Point distribution models for 2D landmark shapes with model-order selection."""

from .errors import (
    DataError,
    DegenerateShape,
    DimensionMismatch,
    InconsistentDimension,
    NotAligned,
    NumericalError,
    OrderOutOfRange,
    ParseError,
    PdmOrderError,
    SingularSystem,
    TooFewSamples,
    ZeroVariance,
)
from .shapes import (
    AlignmentReport,
    Shape,
    ShapeSet,
    align_pair,
    generalized_procrustes,
    load_shape_set,
    mean_shape,
    rmsd,
)
from .pdm import (
    PdmModel,
    TruncatedPdm,
    clamp_to_box,
    fit_pdm,
    load_pdm,
    project_constrained,
    reconstruct,
    save_pdm,
    truncate,
)
from .order_select import (
    OrderSelectionResult,
    RegressionFit,
    SplitData,
    aic_score,
    alternating_ml,
    select_order_proposed,
    select_order_variance,
    split_data,
)
from .simgen import (
    SeedPdm,
    SimConfig,
    SimTruth,
    TransformRanges,
    geometric_spectrum,
    make_seed_pdm_procedural,
    noise_variance,
    parse_spectrum,
    sample_shapes,
    sample_shapes_with_truth,
    seed_pdm_from_model,
)
from .evaluation import (
    CellStats,
    LmmseResult,
    McConfig,
    TrialSummary,
    lmmse_curve,
    lmmse_estimate_landmark,
    monte_carlo_order,
    order_sweep,
)

__version__ = "0.1.0"
