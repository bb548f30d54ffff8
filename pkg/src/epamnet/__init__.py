"""Two-stream (pose + RGB) video action recognition on a small numpy autograd engine.

Submodules:

* :mod:`epamnet.tensor`, :mod:`epamnet.functional`, :mod:`epamnet.oracles` - tensors,
  differentiable ops, brute-force references and the finite-difference checker
* :mod:`epamnet.pose` - skeleton JSON, cropping, frame sampling, heatmap volumes
* :mod:`epamnet.backbones` - X3D-style RGB and pose networks, shapes and cost analysis
* :mod:`epamnet.attention` - pose-driven spatial/temporal attention blocks
* :mod:`epamnet.model` - the two-stream model, joint loss, fusion, training
* :mod:`epamnet.synthetic`, :mod:`epamnet.evaluation`, :mod:`epamnet.cli` - desk-scale
  dataset, evaluation and the ``epamnet`` command
"""

from .errors import (ConfigurationError, ContractError, DimensionError, EmptySkeletonError, EpamError,
                     NumericError, ParseError)
from .model import EPAMNet, ModelConfig, ModelOutput, fuse_scores, joint_loss
from .tensor import Tensor, precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "EmptySkeletonError", "EpamError",
    "NumericError", "ParseError", "EPAMNet", "ModelConfig", "ModelOutput", "fuse_scores", "joint_loss",
    "Tensor", "precision", "set_precision",
]
