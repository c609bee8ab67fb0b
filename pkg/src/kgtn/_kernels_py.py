"""Numpy implementation of the gated-update cell.

This is the fallback backend; `kgtn._gru_ext` implements the same pair of
functions in C (Cython + BLAS) and is preferred when importable.  Both
backends must agree to ~1e-13; `tests/test_backend.py` enforces that.

Shapes, with K nodes and hidden width d:
    a, da            K x 2d   (aggregated incoming/outgoing messages)
    h, h_new, dh     K x d
    wz, wr, w        d x 2d
    uz, ur, u        d x d
"""

import numpy as np

NAME = "numpy"


def _sigmoid(x):
    # Two-branch form avoids overflow warnings for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_cell_forward(a, h, wz, uz, wr, ur, w, u):
    """One gated update step; returns (h_new, cache-for-backward)."""
    z = _sigmoid(a @ wz.T + h @ uz.T)
    r = _sigmoid(a @ wr.T + h @ ur.T)
    c = np.tanh(a @ w.T + (r * h) @ u.T)
    h_new = (1.0 - z) * h + z * c
    return h_new, (z, r, c)


def gru_cell_backward(g, a, h, wz, uz, wr, ur, w, u, cache):
    """Vector-Jacobian product of the cell.

    `g` is d(loss)/d(h_new); returns gradients for
    (a, h, wz, uz, wr, ur, w, u) in that order.
    """
    z, r, c = cache
    dz = g * (c - h)
    dc = g * z
    dh = g * (1.0 - z)

    dca = dc * (1.0 - c * c)
    drh = dca @ u
    dr = drh * h
    dh = dh + drh * r

    dza = dz * z * (1.0 - z)
    dra = dr * r * (1.0 - r)

    da = dca @ w + dza @ wz + dra @ wr
    dh = dh + dza @ uz + dra @ ur

    rh = r * h
    dwz = dza.T @ a
    duz = dza.T @ h
    dwr = dra.T @ a
    dur = dra.T @ h
    dw = dca.T @ a
    du = dca.T @ rh
    return da, dh, dwz, duz, dwr, dur, dw, du
