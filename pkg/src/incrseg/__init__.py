"""Replay-free class-incremental semantic segmentation.

Three cooperating mechanisms drive each incremental step: dense distillation
of intermediate-layer and output embeddings from the frozen previous model,
region-wise triplet contrast between old and live latent spaces, and dynamic
class-specific pseudo-labelling that turns confident old-model predictions
into supervision for unlabelled pixels.
"""

from .contrast import (
    ClassMask,
    ContrastConfig,
    RegionTriple,
    class_mask,
    contrast_loss,
    region_contrast_loss,
    select_region_embeddings,
)
from .distill import (
    DistillConfig,
    DistillLoss,
    LayerWeightConfig,
    distillation_loss,
    layer_weight,
    pixel_kl_divergence,
)
from .errors import IncrsegError
from .metrics import ConfusionMatrix, StepReport, miou, stepwise_report
from .model import StepSnapshot, TapModel, freeze_snapshot
from .pseudolabel import (
    ClassStats,
    LabelSource,
    PseudoLabelConfig,
    SupervisionMask,
    class_score_stats,
    dynamic_threshold,
    fuse_labels,
    generate_pseudo_labels,
    seg_loss,
    total_loss,
)
from .schedule import (
    LabeledSample,
    Protocol,
    SynthSpec,
    TaskSchedule,
    build_schedule,
    generate_synthetic_dataset,
    load_voc_format,
    remap_labels,
    save_voc_format,
    step_image_indices,
)
from .trainer import (
    ExperimentReport,
    StepResult,
    StepState,
    TrainConfig,
    poly_lr,
    run_experiment,
    train_incremental_step,
)

__version__ = "0.1.0"
