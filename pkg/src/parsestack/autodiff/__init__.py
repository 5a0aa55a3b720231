from .functional import (
    BILINEAR_CONVENTION,
    concat_channels,
    conv2d,
    interp_matrix,
    maxpool2d,
    relu,
    softmax,
    softmax_cross_entropy,
    upsample_bilinear,
)
from .optim import sgd_step
from .snapshot import read_tensor, tensor_to_bytes, write_tensor
from .tensor import (
    ComputationTape,
    Tensor,
    active_tape,
    add,
    backward,
    default_dtype,
    mul,
    neg,
    no_grad,
    precision,
    set_precision,
    tape_scope,
    tensor_sum,
)
