"""Finite-difference verification of tape gradients.

Central differences with step h=1e-4 in double precision; intended for
small inputs only (at most a few thousand coordinates in total).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor

DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-3
DEFAULT_ATOL = 1e-6


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = DEFAULT_STEP,
    atol: float = DEFAULT_ATOL,
    coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward gradients of the scalar `f()` to central differences.

    Returns the maximum relative error over the checked coordinates, where
    the relative error of a pair (fd, an) is |fd - an| / max(|fd|, |an|, atol).
    With `coords_per_input` set, only that many randomly chosen coordinates
    of each input are perturbed (the analytic side is always complete).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = f()
    value = out.item()
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    out.backward()
    analytic = []
    for t in inputs:
        g = t.grad
        if g is None:
            g = np.zeros(t.array.size)
        if not np.all(np.isfinite(g)):
            raise NumericError("backward produced non-finite gradients")
        analytic.append(g.copy())
        t.requires_grad = False  # keep finite-difference evaluations off the tape

    worst = 0.0
    try:
        for t, grad in zip(inputs, analytic):
            flat = t.array.reshape(-1)
            if coords_per_input is None or coords_per_input >= flat.size:
                coords = range(flat.size)
            else:
                picker = rng if rng is not None else np.random.default_rng(0)
                coords = picker.choice(flat.size, size=coords_per_input, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + h
                upper = f().item()
                flat[i] = original - h
                lower = f().item()
                flat[i] = original
                if not (np.isfinite(upper) and np.isfinite(lower)):
                    raise NumericError("finite-difference evaluation is not finite")
                fd = (upper - lower) / (2.0 * h)
                an = grad[i]
                err = abs(fd - an) / max(abs(fd), abs(an), atol)
                worst = max(worst, err)
    finally:
        for t in inputs:
            t.requires_grad = True
            t.zero_grad()
    return worst
