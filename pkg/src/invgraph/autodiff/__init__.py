from .tensor import (
    AutodiffError, Tape, Tensor, as_tensor, bilinear_sample, broadcast,
    clamp, concat, conv2d, cos, default_dtype, div, exp, forward_primitive,
    gather, log, matmul, mean, mul, neg, no_tape_data, op_kinds, relu,
    reshape, set_default_dtype, sigmoid, sin, slice_, softmax, sqrt, sub,
    sum_, tanh, transpose, add,
)
from .optim import Adam, AdamState, adam_step
from .gradcheck import grad_check
from .checkpoint import load_checkpoint, save_checkpoint
