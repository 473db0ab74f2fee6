"""Minimal reverse-mode autodiff over 2-D float64 tensors, plus the
optimizer and the finite-difference oracle used to validate gradients."""

from focalcir.numerics.tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    concat_cols,
    concat_rows,
    constant,
    diag_col,
    gelu,
    layer_norm_rows,
    log,
    l2_normalize_rows,
    matmul,
    mean_over_rows,
    mul,
    neg,
    parameter,
    scale,
    scalar_times_const,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)
from focalcir.numerics.optim import AdamState, adam_step
from focalcir.numerics.gradcheck import finite_diff_grad, max_rel_error
from focalcir.numerics.similarity import (
    cosine_sim,
    cosine_sim_matrix,
    l2_normalize,
)

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "add_bias",
    "backward",
    "concat_cols",
    "concat_rows",
    "constant",
    "cosine_sim",
    "cosine_sim_matrix",
    "diag_col",
    "finite_diff_grad",
    "gelu",
    "l2_normalize",
    "l2_normalize_rows",
    "layer_norm_rows",
    "log",
    "matmul",
    "max_rel_error",
    "mean_over_rows",
    "mul",
    "neg",
    "parameter",
    "scale",
    "scalar_times_const",
    "slice_cols",
    "slice_rows",
    "softmax_rows",
    "sub",
    "sum_all",
    "transpose",
]
