"""Split fine-tuning of a toy transformer across an edge and a cloud process.

The FFN down-projection at the split block is replaced by its truncated SVD
(``u``, ``sigma``, ``v``) so only a rank-``R`` activation crosses the link.
"""

from .decompose import ResidualMode, SplitPlan, decompose_ffn
from .nn import LayerStack, ModelConfig, build_model, cross_entropy
from .optim import SGD, Adam, OptimState, optimizer_step
from .splitnet import SplitFineTuning, TrainMetrics, make_step, partition, run_local, run_split_loopback
from .svd import SvdResult, reconstruction_error, svd, truncate

__version__ = "0.1.0"

__all__ = [
    "Adam", "LayerStack", "ModelConfig", "OptimState", "ResidualMode", "SGD", "SplitFineTuning",
    "SplitPlan", "SvdResult", "TrainMetrics", "build_model", "cross_entropy", "decompose_ffn",
    "make_step", "optimizer_step", "partition", "reconstruction_error", "run_local",
    "run_split_loopback", "svd", "truncate",
]
