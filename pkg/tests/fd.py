"""Central finite-difference oracle for gradient checks.

Independent of the tape: it only re-evaluates the forward function at
perturbed inputs. Every analytic gradient in the suite is checked against
this, never against itself.
"""

from __future__ import annotations

import numpy as np


def central_diff(f, arrays: list, which: int, eps: float = 1e-5) -> np.ndarray:
    """d f / d arrays[which] by central differences; f returns a scalar float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[which]
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(*base)
        flat[i] = orig - eps
        fm = f(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max over elements of |analytic - numeric| / (|numeric| + floor)."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))
