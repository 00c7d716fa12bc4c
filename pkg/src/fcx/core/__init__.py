from fcx.core.gradcheck import GradCheckReport, grad_check
from fcx.core.optim import OptimizerState, make_optimizer, opt_step
from fcx.core.stats import variance_of
from fcx.core.tensor import (
    Tensor,
    affine,
    backprop,
    conv2d,
    flatten,
    mse,
    new_tensor,
    relu,
    shortcut,
    softmax_cross_entropy,
)

__all__ = [
    "GradCheckReport", "OptimizerState", "Tensor", "affine", "backprop", "conv2d",
    "flatten", "grad_check", "make_optimizer", "mse", "new_tensor", "opt_step",
    "relu", "shortcut", "softmax_cross_entropy", "variance_of",
]
