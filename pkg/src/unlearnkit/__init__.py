"""Influence-guided dataset reduction for machine unlearning experiments.

The package scores how much each training point matters (exactly, by
leave-one-out retraining, or approximately via curvature, projected
gradients, or gradient norms), filters the lowest-scoring fraction out of
an unlearning request's forget and retain sets, runs the unlearning
algorithm on what remains, and measures what that buys in accuracy,
membership privacy, and wall-clock time.
"""

from .data import (
    Dataset,
    ForgetSpec,
    generate_gaussian_blobs,
    load_csv,
    make_forget_spec,
    train_test_split,
    write_csv,
)
from .errors import (
    ConfigError,
    IngestionError,
    ParameterError,
    PrerequisiteError,
    ShapeError,
    SolverError,
    TrainingError,
    UnlearnKitError,
)
from .evaluation import (
    MIAResult,
    RemovalCurvePoint,
    UnlearnReport,
    accuracy,
    attack_on_losses,
    build_report,
    mia_attack,
    removal_curve,
)
from .experiment import (
    ExperimentConfig,
    config_checksum,
    derive_seed,
    load_config,
)
from .influence import (
    InfluenceScores,
    LowGradientCurve,
    exact_loo_influence,
    exact_loo_scores,
    hessian_influence,
    less_influence,
    low_gradient_count_curve,
    lowest_gradient_scores,
    memorization_score,
    predicted_group_loss_change,
    random_scores,
)
from .models import (
    ArchSpec,
    HessianOperator,
    LossGradient,
    ModelParams,
    hessian_solve,
    hessian_vector_product,
    init_params,
    load_params,
    mean_gradient,
    per_sample_grad,
    per_sample_loss,
    save_params,
    training_hessian,
)
from .ranking import (
    AgreementEntry,
    SelectionResult,
    agreement_matrix,
    class_distribution,
    cosine_filter,
    jaccard_similarity,
    make_selection,
    rank_ids,
    reduce_sets,
    select_bottom,
    spearman_correlation,
)
from .training import GradientTrace, TrainConfig, TrainResult, retrain_without, train
from .unlearning import UnlearnAlgorithm, UnlearnRun, filtered_unlearn, unlearn

__version__ = "0.1.0"
