from .checkpoint import ToyStack, checkpoint_digest
from .data import (
    SHAPE_KINDS,
    TaskBatch,
    ToySample,
    generate_toy_dataset,
    split_by_group,
    take_whole_groups,
)
from .nets import (
    TASKS,
    AnalyticDenoiser,
    Backbone,
    ConvBackbone,
    Denoiser,
    EpsPredictionDenoiser,
    TaskHead,
    ToyDenoiser,
    analytic_denoise,
    make_heads,
)
from .training import TrainConfig, TrainingDivergedError, train_toy_models


def features(backbone: Backbone, x):
    """``(cls, tokens)`` embeddings of ``x``."""
    return backbone(x)
