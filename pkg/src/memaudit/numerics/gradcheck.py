"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nonfinite

    def passed(self, tol: float = 1e-4) -> bool:
        return self.ok and self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(network_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], eps: float = 1e-6,
               max_entries: int | None = None, seed: int = 0,
               analytic: Mapping[str, np.ndarray] | None = None,
               floor: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients of ``network_fn`` against central differences.

    ``network_fn`` receives a dict of leaf tensors (same keys as ``params``)
    and must return a scalar :class:`Tensor`. ``max_entries`` caps the number
    of coordinates probed per parameter (sampled without replacement).
    ``analytic`` overrides the backprop gradients, which is how a corrupted
    gradient is fed through the same comparison.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    nonfinite: list[str] = []

    if analytic is None:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in work.items()}
        loss = network_fn(leaves)
        analytic = backward(loss, leaves, check_finite=False)

    def f() -> float:
        leaves = {k: Tensor(v, name=k) for k, v in work.items()}
        return float(network_fn(leaves).data)

    errors: list[np.ndarray] = []
    per_param: dict[str, float] = {}
    for key, arr in work.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * eps)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(grad[idx]))):
            nonfinite.append(key)
            per_param[key] = float("nan")
            continue
        err = relative_error(grad[idx], num, floor)
        errors.append(err)
        per_param[key] = float(err.max()) if err.size else 0.0

    allerr = np.concatenate(errors) if errors else np.zeros(0)
    return GradCheckReport(
        max_rel_error=float(allerr.max()) if allerr.size else 0.0,
        mean_rel_error=float(allerr.mean()) if allerr.size else 0.0,
        n_checked=int(allerr.size),
        per_param=per_param,
        nonfinite=nonfinite,
    )
