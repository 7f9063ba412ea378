from __future__ import annotations

from typing import Mapping

import numpy as np

from .numerics import NonFiniteError, Tensor


class TrainingDivergedError(NonFiniteError):
    """A training step produced a non-finite loss or gradient.

    ``last_good`` holds a copy of the parameters from the end of the last
    completed epoch.
    """

    def __init__(self, message: str, epoch: int, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0,
              dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


def leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def snapshot(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def cast(params: Mapping[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def param_report(params: Mapping[str, np.ndarray]) -> list[tuple[str, tuple[int, ...], int]]:
    return [(k, tuple(v.shape), int(v.size)) for k, v in params.items()]


def smoothed(curve, window: int = 5) -> np.ndarray:
    c = np.asarray(curve, dtype=np.float64)
    if c.size < window:
        return c
    return np.convolve(c, np.ones(window) / window, mode="valid")
