"""Sparse mixture-of-experts routing over synthetic multimodal 3D tokens,
with voxel-coverage keyframe sampling and routing analytics."""

from .errors import (BudgetExceeded, ConfigError, DimensionError, DomainError,
                     EvaluationError, TrainingDivergence)
from .model import FusionModel, ModelConfig
from .moe import (DenseFFN, Expert, MoELayer, ModelStack, Router, RoutingRecord, RoutingTrace,
                  forward_stack, init_experts_from_ffn, moe_forward, route, select_topk)
from .objective import balance_loss, cross_entropy, total_loss
from .tokens import FeatureSpec, SyntheticTaskSpec, UnifiedSequence, synth_features
from .trainer import Checkpoint, TrainConfig, stage1_train, stage2_train

__version__ = "0.1.0"
