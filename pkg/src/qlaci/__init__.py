"""Q-learning for multi-stage treatment regimes with adaptive confidence
intervals built by bootstrapping pretest-partitioned smooth bounds, plus
comparator interval methods, exact generative-model simulators, and a Monte
Carlo coverage/width harness."""

__version__ = "0.1.0"

from .dataio import (
    DataFormatError,
    Dataset,
    DesignSpec,
    StageDesign,
    StageRecord,
    Trajectory,
    build_design,
    contrast_coding,
    design_rows,
    feature_matrix,
    indicator_coding,
    load_csv,
    present_mask,
    subset,
    write_csv,
)
from .linreg import OlsFit, SingularDesignError, fit_ols, interaction_cov, pairwise_cov
from .qlearn import (
    FittedStage,
    QFit,
    Regime,
    contrast_value,
    extract_regime,
    fit_qlearning,
    q_matrix,
)
from .pretest import (
    LambdaRule,
    TreatSet,
    lambda_value,
    parse_lambda_rule,
    pretest_binary,
    pretest_multi,
    rule_text,
    stacked_effective_cov,
    treat_set,
    zeta_from_stacked,
)
from .bounds import (
    BoundsResult,
    GammaSearch,
    bounds_general,
    bounds_two_stage,
    draw_candidates,
    eval_two_stage,
    prep_two_stage,
    smooth_term,
)
from .resample import (
    BootstrapPlan,
    Interval,
    RedrawLimitError,
    aci_interval,
    cpb_interval,
    quantile,
    resample,
)
from .comparators import (
    ToyEstimate,
    UnsupportedMethodError,
    ppe_interval,
    ppe_statistic,
    st_interval,
    st_pseudo_outcome,
    toy_estimates,
    toy_sweep,
)
from .genmodels import (
    MODEL_LABELS,
    SUITES,
    TERNARY_CODING,
    GenModelSpec,
    expit,
    model_spec,
    population,
    regularity_measures,
    simulate,
    suite_design,
)
from .harness import (
    CellReport,
    ExperimentConfig,
    ExperimentError,
    ExperimentReport,
    FailedRep,
    RepRecord,
    Target,
    flag_significance,
    parse_target,
    run_experiment,
    true_coefficients,
    true_parameter,
    write_rep_log_csv,
    write_summary_csv,
)
