"""optbench: minibatch benchmarking of SGD, Fletcher-Reeves nonlinear CG,
and L-BFGS, with a two-way ANOVA analysis pipeline."""

from .objective import (
    BatchObjective,
    BatchPlan,
    Dataset,
    DivergenceError,
    Evaluation,
    ModelSpec,
    evaluate,
    generate_synthetic_dataset,
    init_params,
    make_batch_plan,
    measure_accuracy,
)
from .optimizers import (
    FrState,
    LbfgsState,
    LineSearchResult,
    SgdState,
    backtracking_line_search,
    fr_batch_step,
    fr_beta,
    fr_direction,
    lbfgs_batch_step,
    lbfgs_direction,
    sgd_step,
    wolfe_line_search,
)
from .stats import (
    AnovaTable,
    CorrelationResult,
    ObservationTable,
    PairwiseResult,
    RatioSummary,
    anova_type3,
    f_p_value,
    fit_two_way_model,
    log_transform,
    pairwise_by_slice,
    pearson_correlation,
    treat_outliers,
    ttpa_ratio_summary,
)
from .sweep import (
    ExperimentConfig,
    TrainingRun,
    expand_grid,
    run_training,
    runs_to_observations,
    sample_configs,
)

__version__ = "0.1.0"
