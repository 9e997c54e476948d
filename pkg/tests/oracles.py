"""Reference implementations kept deliberately naive: plain loops, no shared code with the package."""
from __future__ import annotations

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for a in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    s = float(b[o])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                    out[a, o, i, j] = s
    return out


def dense_loops(x, w, b):
    n, d_in = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out))
    for a in range(n):
        for o in range(d_out):
            s = float(b[o])
            for k in range(d_in):
                s += x[a, k] * w[o, k]
            out[a, o] = s
    return out


def maxpool_windows(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for a in range(n):
        for ch in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    out[a, ch, i, j] = max(
                        x[a, ch, i * k + u, j * k + v] for u in range(k) for v in range(k)
                    )
    return out


def cross_entropy_reference(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - np.log(sum(np.exp(v - m) for v in row)))
    return total / len(labels)


def central_difference(f, arr, eps=1e-4):
    """d f / d arr by central differences, perturbing ``arr`` in place and restoring it."""
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(actual, expected) -> float:
    """``max|a - e| / max(max|a|, max|e|)``; 0 when both are identically zero."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.abs(actual).max(initial=0.0), np.abs(expected).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(actual - expected).max() / scale)


def normalized_map(m):
    v = np.array(m, dtype=np.float64).ravel()
    norm = np.sqrt(sum(t * t for t in v))
    return v / norm if norm > 0 else np.zeros_like(v)


def two_pass_mean_maps(maps):
    """``maps``: [N, c, h, w] activations. Normalize every map, then average (two passes)."""
    maps = np.asarray(maps, dtype=np.float64)
    n, c = maps.shape[:2]
    stored = [[normalized_map(maps[s, ch]) for ch in range(c)] for s in range(n)]
    return np.array([[sum(stored[s][ch][k] for s in range(n)) / n for k in range(stored[0][ch].size)]
                     for ch in range(c)])


def dot_rows(a, b):
    return np.array([sum(x * y for x, y in zip(ra, rb)) for ra, rb in zip(a, b)])
