"""Minimal dense-tensor numeric core: float64 tensors, a reverse-mode
autodiff tape, Adam, deterministic RNG, and binary checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, OptimError, adam_step, init_adam
from .rng import glorot_init, seeded_rng, zeros_init
from .tensor import (
    ShapeError,
    TapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    dilated_causal_conv1d,
    grad_of,
    leaky_relu,
    matmul,
    mul,
    neg,
    pause_recording,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    reset_tape,
    sigmoid,
    softmax,
    softplus,
    sub,
    take,
    take_slice,
    tanh,
    tape_size,
    transpose,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "OptimError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "absolute",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "dilated_causal_conv1d",
    "glorot_init",
    "grad_of",
    "init_adam",
    "leaky_relu",
    "load_checkpoint",
    "matmul",
    "mul",
    "neg",
    "pause_recording",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reset_tape",
    "reshape",
    "save_checkpoint",
    "seeded_rng",
    "sigmoid",
    "softmax",
    "softplus",
    "sub",
    "take",
    "take_slice",
    "tanh",
    "tape_size",
    "transpose",
    "zeros_init",
]
