"""Tensors, differentiable operations, parameters and optimization."""
from .gradcheck import GradcheckReport, gradcheck, rel_error
from .ops import (
    DICE_EPS,
    activation,
    bilinear_sample,
    conv2d,
    cross_entropy,
    deconv2d,
    l1_loss,
    one_hot,
    relu,
    sigmoid,
    soft_dice_loss,
    softmax,
    tanh,
    tv_regularizer,
)
from .optim import AdamState, OptimizerStateError, adam_step
from .params import CheckpointError, ParamStore, he_normal, load_checkpoint, save_checkpoint
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat,
    mean,
    mul,
    no_tape,
    reflect_pad,
    reshape,
    scale,
    shift,
    take,
    weighted_sum,
)
