"""Deterministic federated-optimization simulator.

Local epochs with random reshuffling, arbitrary client sampling, pluggable
step-size normalization and aggregation, momentum variance reduction, and
exact enumeration oracles for the sampling-variance bounds.
"""

from .aggregation import (
    AggregationRule,
    EffectiveObjective,
    aggregate,
    consistency_restoring_weights,
    effective_weights,
    gen_variance_constants,
    predicted_limit,
)
from .algorithms import (
    DivergenceError,
    GenConfig,
    MomentumConfig,
    RunLog,
    StepSchedule,
    mvr_init,
    mvr_momentum_update,
    practical_global_momentum,
    run,
    run_fixed_steps,
    select_output,
    theorem1_max_step,
    theorem2_hyperparams,
)
from .local import (
    LocalWorkSpec,
    MomentumState,
    PermutationPlan,
    make_permutations,
    run_local,
    run_local_mvr,
)
from .problems import (
    DuplicatedQuadratic,
    HeterogeneityConstants,
    LogisticProblem,
    Problem,
    QuadraticProblem,
    UnsupportedProblemError,
    duplicated_quadratic,
    estimate_constants,
    importance_quadratic,
    inconsistent_fixed_point,
    make_logistic,
    quad_obj,
    true_minimizer,
)
from .sampling import (
    AggregationNormalizer,
    CustomNormalizer,
    SamplingScheme,
    SumOneNormalizer,
    UnbiasedNormalizer,
    expected_contribution,
    general_variance_check,
    importance_scheme,
    m_constant,
    swr_variance_check,
    variance_bound_check,
)

__version__ = "0.1.0"
