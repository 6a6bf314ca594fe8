"""Desk-scale laboratory for merging task-specific fine-tuned models.

Implements four fine-tuning paradigms over a self-contained tensor and
autodiff core (full fine-tuning, full-model linearization, low-rank
adapters, and partially linearized low-rank adapters trained in tangent
space), four multi-task fusion algorithms with their hyperparameter
sweeps, and a weight-disentanglement analysis suite, all on deterministic
synthetic task families.
"""

from .autodiff import Tensor, grad, jvp, matmul, vjp
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FuselabError,
    ResourceLimitError,
    TrainingDivergedError,
    UndefinedSimilarityError,
)
from .models import LinearizedState, ModeTag, ModelSpec, build_model, forward, forward_linearized
from .params import ParamTree
from .task_vectors import (
    TaskVector,
    compute_task_vector,
    cosine_similarity,
    embed_in_joint_space,
    linear_combine,
    similarity_matrix,
)
from .tasks import Dataset, Task, TaskSuite, make_task_suite
from .training import TrainConfig, cross_entropy_loss, evaluate, finetune

__version__ = "0.1.0"
