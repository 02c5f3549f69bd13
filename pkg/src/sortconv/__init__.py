"""Sorted convolution: rotation-invariant convolution by sorting neighbourhoods.

Every pixel's neighbourhood is sampled (on the square grid or on concentric
circles), sorted ascending, and only then weighted by the kernel. Rotating
the input permutes each neighbourhood without changing its values, so the
sorted block and the layer response stay the same.
"""
__version__ = "0.1.0"

from ._config import deterministic, is_deterministic, no_grad, set_deterministic
from .errors import (
    ConfigurationError, ContractError, ParseError, ShapeError, SortConvError, TrainingError,
    UnsupportedOperationError,
)
from .tensor import Parameter, Tensor, conv2d_strided, forward_op
from .sampler import SamplePlan, build_sample_plan, sample_neighborhood
from .sorter import (
    SortPlan, build_sort_plan, sort_expand, sort_expand_backward, sort_neighborhood,
    sorted_conv2d,
)
from .layers import Conv2d, SortedConv2d, sc_forward, std_forward
from .models import Model, ModelSpec, all_variants, build_model, invariant_feature, load_model
from .trainer import TrainConfig, evaluate, train
from .estimator import InvariantFeatureExtractor, SCNNClassifier

__all__ = [
    "ConfigurationError", "ContractError", "Conv2d", "InvariantFeatureExtractor", "Model",
    "ModelSpec", "Parameter", "ParseError", "SCNNClassifier", "SamplePlan", "ShapeError",
    "SortConvError", "SortPlan", "SortedConv2d", "Tensor", "TrainConfig", "TrainingError",
    "UnsupportedOperationError", "all_variants", "build_model", "build_sample_plan",
    "build_sort_plan", "conv2d_strided", "deterministic", "evaluate", "forward_op",
    "invariant_feature", "is_deterministic", "load_model", "no_grad", "sample_neighborhood",
    "sc_forward", "set_deterministic", "sort_expand", "sort_expand_backward",
    "sort_neighborhood", "sorted_conv2d", "std_forward", "train",
]
