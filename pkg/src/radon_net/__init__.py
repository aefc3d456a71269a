"""Cross-domain Siamese matching with untied branches."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .dataset import DatasetIndex, PreprocessSpec, load_index, make_synthetic, split_classes
from .evaluation import compute_roc, enumerate_eval_pairs, evaluate, score_matrix
from .model import LayerSpec, SiameseModel, build_model, load_weights, reference_spec, save_weights, score
from .training import AdamState, OptimizerConfig, SamplerConfig, adam_step, sample_batch, train

__all__ = [
    "AdamState", "DatasetIndex", "LayerSpec", "OptimizerConfig", "PreprocessSpec", "SamplerConfig",
    "SiameseModel", "Tensor", "adam_step", "backward", "build_model", "compute_roc", "enumerate_eval_pairs",
    "evaluate", "load_index", "load_weights", "make_synthetic", "no_grad", "reference_spec", "sample_batch",
    "save_weights", "score", "score_matrix", "split_classes", "train",
]
