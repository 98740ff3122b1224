"""Constrained image-aware layout generation toolkit."""

from .constraints import (
    AttributeConstraint,
    AttributeKind,
    NoiseSpec,
    PartialLayout,
    RandomMask,
    apply_mask,
    attribute_mean,
    presence_from_zero_convention,
    sample_noise,
    sample_random_mask,
)
from .core import (
    BBox,
    Category,
    Element,
    Layout,
    PredictionBatch,
    Q_MAX,
    flatten,
    hard_counts,
    layout_from_json,
    layout_to_json,
    unflatten,
)
from .genmodel import (
    Forward,
    ModelConfig,
    ModelParams,
    decode,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .losses import (
    LossWeights,
    attribute_consistent_loss,
    attribute_disentangled_loss,
    flatten_predictions,
    masked_partial_loss,
    partial_loss,
    reconstruction_loss,
    soft_count,
    total_loss,
)
from .matching import build_cost, hungarian
from .metrics import Grid, MetricReport
from .synthdata import DatasetSpec, Sample, extract_partial, generate, load_grid, save_grid

__version__ = "0.1.0"
