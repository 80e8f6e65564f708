"""Shared oracles for the test suite."""
import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (modified in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = [index] if index is not None else np.ndindex(arr.shape)
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def naive_conv(x, w, b=None):
    """Six nested loops, zero padding, cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i + di - p, j + dj - p
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += x[c, y, xx] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def naive_pool(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = max(x[ch, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
    return out
