"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numerical_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-7) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)`` over all arrays jointly."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
