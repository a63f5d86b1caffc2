import numpy as np
import pytest


def finite_difference(f, arrays, h=1e-4):
    """Central finite differences of a scalar function of the given arrays.

    ``f`` takes no arguments and must re-read the (float64) arrays on every
    call; the arrays are perturbed in place one entry at a time.
    """
    grads = []
    for x in arrays:
        assert x.dtype == np.float64, "finite differences need float64 inputs"
        g = np.zeros_like(x)
        flat, gflat = x.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """max |a - n| / max(1, |n|), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
