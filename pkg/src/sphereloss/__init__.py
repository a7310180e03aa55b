"""Angular-margin softmax losses (Li-ArcFace and baselines), a lightweight
face-network descriptor, and a desk-scale training/evaluation stack."""

from .arch import (
    ArchSpec,
    FlopsReport,
    LayerSpec,
    build_default_arch,
    count_flops_params,
    infer_shapes,
    instantiate_toy,
)
from .datagen import SphereDatasetSpec, gen_glyph_images, gen_pair_protocol, gen_sphere_dataset
from .distill import DistillSpec, distill_loss_grad
from .estimators import HypersphereNormalizer, MarginEmbeddingClassifier
from .losses import (
    MarginLossSpec,
    logit_curve_table,
    loss_forward_backward,
    margin_logits,
    overlap_map,
)
from .nn import TrainConfig, adversarial_gradient_probe, train
from .sphere import angle_between, clamped_acos_with_grad, normalize
from .verification import ScoredPairs, rank1_identification, tar_at_far, tenfold_verification

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "DistillSpec",
    "FlopsReport",
    "HypersphereNormalizer",
    "LayerSpec",
    "MarginEmbeddingClassifier",
    "MarginLossSpec",
    "ScoredPairs",
    "SphereDatasetSpec",
    "TrainConfig",
    "adversarial_gradient_probe",
    "angle_between",
    "build_default_arch",
    "clamped_acos_with_grad",
    "count_flops_params",
    "distill_loss_grad",
    "gen_glyph_images",
    "gen_pair_protocol",
    "gen_sphere_dataset",
    "infer_shapes",
    "instantiate_toy",
    "logit_curve_table",
    "loss_forward_backward",
    "margin_logits",
    "normalize",
    "overlap_map",
    "rank1_identification",
    "tar_at_far",
    "tenfold_verification",
    "train",
]
