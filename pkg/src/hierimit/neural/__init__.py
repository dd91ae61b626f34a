from .autodiff import (
    IndexOutOfRange,
    ShapeMismatch,
    Tensor,
    as_tensor,
    concat,
    div,
    exp,
    grad_enabled,
    index,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    take_rows,
    tanh,
    tmean,
    tsum,
    where_mask,
)
from .nn import (
    Dense,
    Embedding,
    LstmCell,
    MLP,
    ParamStore,
    gaussian_logpdf,
    l2_rows,
    lstm_unroll,
    mse,
    softmax_ce,
)

__all__ = [
    "IndexOutOfRange",
    "ShapeMismatch",
    "Tensor",
    "as_tensor",
    "concat",
    "div",
    "exp",
    "grad_enabled",
    "index",
    "log",
    "log_softmax",
    "matmul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "square",
    "take_rows",
    "tanh",
    "tmean",
    "tsum",
    "where_mask",
    "Dense",
    "Embedding",
    "LstmCell",
    "MLP",
    "ParamStore",
    "gaussian_logpdf",
    "l2_rows",
    "lstm_unroll",
    "mse",
    "softmax_ce",
]
