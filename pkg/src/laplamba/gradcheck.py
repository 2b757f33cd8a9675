"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    coords_checked: int
    worst: str = ""
    passed: bool = False
    details: list = field(default_factory=list)


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    rtol: float = 1e-4,
    max_coords: Optional[int] = None,
    floor_frac: float = 1e-3,
    seed: int = 0,
    name: str = "fn",
) -> GradCheckResult:
    """Compare ``backward`` gradients of the scalar ``fn()`` with central differences.

    ``tensors`` are (label, leaf) pairs whose gradients are verified. With
    ``max_coords`` set, at most that many coordinates per tensor are sampled.
    """
    for _, t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {label: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for label, t in tensors}
    rng = np.random.default_rng(seed)
    sampled = []
    for label, t in tensors:
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for k, idx in enumerate(coords):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = fn().item()
                flat[idx] = orig - h
                fm = fn().item()
                flat[idx] = orig
                numeric[k] = (fp - fm) / (2.0 * h)
        sampled.append((label, coords, analytic[label].reshape(-1)[coords], numeric))
    # Entries far below the largest gradient component are compared against a
    # floor tied to that component, where difference round-off would dominate.
    scale = max((max(np.abs(a).max(initial=0.0), np.abs(nm).max(initial=0.0))
                 for _, _, a, nm in sampled), default=0.0)
    floor = max(floor_frac * scale, 1e-12)
    worst_err, worst_at, total = 0.0, "", 0
    details = []
    for label, coords, a, numeric in sampled:
        errs = _rel_errors(a, numeric, floor)
        total += coords.size
        e = float(errs.max(initial=0.0))
        details.append((label, e, int(coords.size)))
        if e > worst_err:
            j = int(np.argmax(errs))
            worst_err = e
            worst_at = f"{label}[{int(coords[j])}] analytic={a[j]:.6e} numeric={numeric[j]:.6e}"
    return GradCheckResult(name, worst_err, total, worst_at, worst_err <= rtol, details)


def weighted_sum_loss(out: Tensor, seed: int = 1) -> Tensor:
    """Scalar probe sum(out * R) with fixed random R, avoiding symmetric cancellation."""
    from . import ops

    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r)))
