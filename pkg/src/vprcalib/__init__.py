"""Self-supervised calibration of place-recognition descriptors.

Mine (anchor, positive, negatives) tuples from one traversal by geometric
verification and robust pose-graph filtering, fine-tune an embedding head on
them with a triplet loss, and measure loop-closure detection before and after.
"""

__version__ = "0.1.0"

from .descriptors import DescriptorStore  # noqa: E402
from .evaluation import EvalConfig, evaluate, verify_pairs  # noqa: E402
from .geometry import Pose, Twist  # noqa: E402
from .mining import MiningConfig, TrainingTuple, TupleStatus, mine, tuning_set  # noqa: E402
from .optimizer import GncConfig, LMConfig, gnc_solve, optimize_lm  # noqa: E402
from .posegraph import PoseGraph, chain_initialize, read_g2o, save_g2o, trajectory_rmse  # noqa: E402
from .registration import RegistrationConfig, estimate_relative_pose  # noqa: E402
from .simulator import WorldConfig, generate  # noqa: E402
from .training import EmbeddingHead, TrainConfig, train  # noqa: E402

__all__ = [
    "DescriptorStore",
    "EmbeddingHead",
    "EvalConfig",
    "GncConfig",
    "LMConfig",
    "MiningConfig",
    "Pose",
    "PoseGraph",
    "RegistrationConfig",
    "TrainConfig",
    "TrainingTuple",
    "TupleStatus",
    "Twist",
    "WorldConfig",
    "chain_initialize",
    "estimate_relative_pose",
    "evaluate",
    "generate",
    "gnc_solve",
    "mine",
    "optimize_lm",
    "read_g2o",
    "save_g2o",
    "train",
    "trajectory_rmse",
    "tuning_set",
    "verify_pairs",
]
