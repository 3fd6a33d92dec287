"""Independent numeric oracles used to check the autodiff core.

Everything here is computed without the tape: central finite differences
in float64, plus closed-form references for the handful of ops where a
textbook formula exists.
"""

import numpy as np


def central_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar-valued ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want)) / denom
