"""Shared oracles for the test suite.

The finite-difference helpers only evaluate forward passes, so they stay
independent of the backward implementation they are used to check.
"""

import numpy as np


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = f(x)
        xf[i] = orig - h
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(approx, reference, floor=1e-8):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
