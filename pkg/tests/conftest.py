import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, arr, h=1e-6):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    """Entrywise relative error, max over entries."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def loop_conv(x, w, b, d):
    """Direct evaluation of the dilated causal sum, one output at a time."""
    c_out, c_in, k = w.shape
    T = x.shape[1]
    y = np.zeros((c_out, T))
    for o in range(c_out):
        for t in range(T):
            acc = b[o]
            for i in range(k):
                s = t - d * i
                if s >= 0:
                    for c in range(c_in):
                        acc += w[o, c, i] * x[c, s]
            y[o, t] = acc
    return y
