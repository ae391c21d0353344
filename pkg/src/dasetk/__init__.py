"""dasetk: order-sensitive volume-to-image encoding plus curriculum training.

The pipeline: an ordered 3D volume is collapsed into a single 2D "dynamic
image" by a harmonic-weighted sum that is exactly one ranking-objective
subgradient step (with order-insensitive poolings as baselines), and a small
grouped-attention CNN is trained on those images under a complexity-gated
stage curriculum. Everything runs on numpy with a built-in reverse-mode
autodiff core; every run is deterministic given its config and seed.
"""

from .encoding import (
    CoefficientVector,
    DynamicImage,
    RankPoolProblem,
    arp_coefficients,
    encode,
    encode_arp,
    encode_baseline,
    encode_volume,
    harmonic,
    pairwise_oracle,
    rank_pool_oracle,
)
from .autodiff import ConvSpec, Tensor, grad_check, param_count
from .curriculum import (
    ComplexityScore,
    CurriculumState,
    FusionWeights,
    advance,
    calibrate_thresholds,
    complexity,
    fuse_stages,
)
from .metrics import (
    FoldPlan,
    MetricsReport,
    auc_ap,
    classification_metrics,
    dice,
    kfold_split,
    mae,
)
from .network import (
    DgmConfig,
    Model,
    ModelSpec,
    StageSpec,
    build_model,
    dgm_block,
    dgm_weight_map,
    linear_bottleneck,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamW, OptimState, adamw_step, cosine_lr
from .synthetic import SynthSpec, gen_dataset, gen_synthetic_volume
from .training import (
    EncodedDataset,
    RunConfig,
    TrainResult,
    encode_dataset,
    evaluate,
    predict_subject,
    train,
)
from .volume import (
    HistogramSpec,
    PlanarImage,
    Volume,
    histogram_correlation,
    load_volume,
    normalize_volume,
    save_volume,
    slices,
    volume_from_slices,
)
from .comparison import ComparisonTable, pooling_comparison

__version__ = "0.1.0"
