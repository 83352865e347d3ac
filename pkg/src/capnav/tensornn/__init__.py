from capnav.tensornn.autograd import (
    ShapeError,
    TapeError,
    Tensor,
    as_tensor,
    concat,
    maximum,
    minimum,
    no_grad,
    stack,
)
from capnav.tensornn.checkpoint import FormatError, load_checkpoint, save_checkpoint
from capnav.tensornn.layers import (
    MLP,
    GaussianPolicyHead,
    Linear,
    MlpSpec,
    Module,
    elu,
    forward,
    gaussian_log_prob,
    mse,
)
from capnav.tensornn.optim import Adam, AdamState, adam_step, clip_grad_norm


def backward(loss: Tensor) -> None:
    loss.backward()


__all__ = [
    "Adam", "AdamState", "FormatError", "GaussianPolicyHead", "Linear", "MLP", "MlpSpec", "Module",
    "ShapeError", "TapeError", "Tensor", "adam_step", "as_tensor", "backward", "clip_grad_norm", "concat",
    "elu", "forward", "gaussian_log_prob", "load_checkpoint", "maximum", "minimum", "mse", "no_grad",
    "save_checkpoint", "stack",
]
