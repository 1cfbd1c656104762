from .core import (
    GraphError,
    Node,
    Tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    topological_order,
)
from . import ops
from .ops import (
    activation,
    add_channel,
    avg_pool2d,
    concat,
    conv2d,
    elementwise,
    l1,
    linear,
    matmul,
    mse,
    mul_channel,
    relu,
    scale_batch,
    sigmoid,
    silu,
    upsample_nearest2x,
)
from .nn import Activation, AvgPool, Conv2d, Linear, Module, Parameter, Sequential, Upsample
from .optim import AdamW, AdamWState, FrozenParameterError, adamw_step
from .gradcheck import GradCheckReport, finite_difference_check, numerical_gradient, relative_error
from .serialize import (
    FormatError,
    decode_checkpoint,
    decode_tensor,
    encode_checkpoint,
    encode_tensor,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
