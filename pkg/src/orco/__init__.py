"""Few-shot class-incremental learning with fixed orthogonal pseudo-targets."""
from .batch import FeatureBatch
from .config import RunConfig, build_run_config, dump_run_config, load_run_config
from .data import (
    FeatureDataset,
    SessionData,
    SyntheticSpec,
    augment_view,
    generate_synthetic,
    load_feature_file,
    partition_fscil,
    save_feature_file,
)
from .errors import (
    CapacityError,
    ConfigurationError,
    DegenerateMeanError,
    EmptyScopeError,
    GenerationFailureError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
    OrcoError,
    ParseError,
    ScheduleExhaustedError,
    TrainingFailureError,
    UnassignedClassError,
)
from .estimator import OrCoClassifier, PseudoTargetGenerator
from .geometry import (
    AngleStats,
    Distribution,
    PerturbedTargets,
    TargetSet,
    generate_random_targets,
    load_targets,
    optimize_targets,
    pairwise_angle_stats,
    perturb_targets,
    save_targets,
    target_generation_grad,
    target_generation_loss,
)
from .losses import (
    CeScope,
    ContrastiveContext,
    LossResult,
    PerturbScope,
    ce_loss,
    orco_loss,
    orth_loss,
    pretrain_loss,
    pscl_loss,
    scl_loss,
    sscl_loss,
)
from .matching import (
    Assignment,
    AssignmentState,
    ClassMeans,
    Strategy,
    assign_session,
    class_means,
    hungarian,
    load_assignment,
    save_assignment,
)
from .metrics import (
    RunSummary,
    SessionReport,
    fp_inc,
    harmonic_mean,
    nearest_target_classify,
    sim_cls,
    sim_cls_to_target,
    summarize,
)
from .model import (
    CosineWarmup,
    FreezePlan,
    OptimizerKind,
    OptimizerState,
    ProjectionModel,
    backward,
    forward,
    load_model,
    optimizer_step,
    save_model,
)
from .protocol import (
    ExemplarMemory,
    PhaseConfig,
    SessionPlan,
    phase1_pretrain,
    phase2_base_align,
    phase3_incremental,
    run_fscil,
    run_fscil_detailed,
)

__version__ = "0.1.0"
