"""Deterministic random streams and parameter initialization.

A counter-based Philox generator is used instead of the platform default
so that a fixed seed yields a bit-identical stream across runs.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    # conv kernels [C_out, C_in, K...]: receptive field multiplies both fans
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def glorot_init(shape, rng: np.random.Generator, requires_grad: bool = True) -> Tensor:
    fan_in, fan_out = _fans(tuple(shape))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


def zeros_init(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
