"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: List[float]
    tol: float
    flagged: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the pair."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, h: float,
                       indices: Optional[Sequence[int]] = None, fd_dtype=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param`` (optionally a subset of entries).

    With ``fd_dtype=np.float64`` the perturbed parameter is promoted while
    probing, so everything downstream of it is evaluated in double precision.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    original = param.data
    base = original if fd_dtype is None else original.astype(fd_dtype)
    for i in idx:
        plus = base.copy().reshape(-1)
        plus[i] += h
        param.data = plus.reshape(original.shape)
        with no_grad():
            fp = f().item()
        minus = base.copy().reshape(-1)
        minus[i] -= h
        param.data = minus.reshape(original.shape)
        with no_grad():
            fm = f().item()
        grad[i] = (fp - fm) / (2.0 * h)
    param.data = original
    return grad.reshape(param.shape)


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                            tol: float = 1e-3, max_entries: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None, fd_dtype=None) -> GradCheckReport:
    """Compare ``backward()`` gradients of ``f`` against central differences.

    Returns the max relative error per parameter; any parameter at or above
    ``tol`` is flagged. ``max_entries`` subsamples large parameters.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    rng = rng or np.random.default_rng(0)
    errors: List[float] = []
    for p, a in zip(params, analytic):
        indices = None
        if max_entries is not None and p.size > max_entries:
            indices = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numerical_gradient(f, p, h, indices, fd_dtype=fd_dtype)
        if indices is not None:
            errors.append(relative_error(a.reshape(-1)[indices], numeric.reshape(-1)[indices]))
        else:
            errors.append(relative_error(a, numeric))
    flagged = [i for i, e in enumerate(errors) if not e < tol]
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol, flagged)
