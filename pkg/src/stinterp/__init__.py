"""Cross-slice interpolation of spatial transcriptomics maps.

Public surface: the :class:`~stinterp.estimator.SliceInterpolator` estimator,
the tensor/autodiff core, the synthetic data pipeline, and the training and
evaluation harness. The ``stinterp`` CLI exposes the same functionality from
the shell.
"""
from .data import GeneratorConfig, HEPatch, SliceTuple, STPatch, generate_volume, make_tuples
from .estimator import SliceInterpolator
from .model import InterpolationNetwork, ModelConfig
from .tensor import Tensor, no_grad
from .training import RunConfig, baseline_linear, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "GeneratorConfig",
    "HEPatch",
    "InterpolationNetwork",
    "ModelConfig",
    "RunConfig",
    "SliceInterpolator",
    "SliceTuple",
    "STPatch",
    "Tensor",
    "baseline_linear",
    "evaluate",
    "generate_volume",
    "make_tuples",
    "no_grad",
    "train",
    "__version__",
]
