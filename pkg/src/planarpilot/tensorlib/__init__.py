from .tensor import (
    Tensor,
    TensorError,
    add,
    add_bias,
    add_const,
    attention,
    backward,
    causal_mask,
    concat,
    constant,
    default_dtype,
    div,
    dtype,
    embedding,
    exp,
    finite_checks,
    gelu,
    layernorm,
    log,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    parameter,
    reshape,
    scale,
    softmax,
    softplus,
    split,
    sqrt,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .optim import Adam
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
