"""Central finite-difference oracle for recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    """Outcome of comparing recorded gradients against central differences."""

    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare f's recorded gradients with (f(p+h) - f(p-h)) / 2h.

    f must be deterministic and re-runnable: it is called once to record the
    graph and then repeatedly with perturbed parameter entries. Large
    parameters may be spot-checked on a random coordinate subset.
    """
    for _, p in params:
        p.grad = None
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in params:
        analytic[name] = p.grad.data.copy() if p.grad is not None else np.zeros_like(p.data)
        p.grad = None

    # probes run with grad mode untouched: attack-style objectives record and
    # differentiate internally even when only their value is consumed
    per_param: dict[str, float] = {}
    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param is not None and n > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        numeric = np.zeros(len(coords))
        for slot, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            up = f().item()
            flat[idx] = orig - h
            down = f().item()
            flat[idx] = orig
            numeric[slot] = (up - down) / (2.0 * h)
        ana = analytic[name].reshape(-1)[coords]
        errs = _relative_errors(ana, numeric, rel_floor)
        per_param[name] = float(errs.max()) if len(errs) else 0.0
        worst = max(worst, per_param[name])
    return GradCheckReport(max_rel_error=worst, per_param=per_param, tolerance=tolerance)
