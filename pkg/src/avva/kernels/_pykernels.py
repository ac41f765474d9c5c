"""Numpy implementations of the hot numeric kernels.

Fallback backend used when the compiled extension is unavailable (or when
``AVVA_PURE_PYTHON`` is set). Semantics must stay in lockstep with
``_ckernels.pyx``; the parity tests compare both backends elementwise.
"""

import numpy as np

BACKEND = "numpy"


def softmax_rows(x):
    """Row-wise softmax of a 2-D float64 array, numerically stabilised."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(w, dw):
    """Backprop through a row softmax: ds = w * (dw - sum(dw * w, row))."""
    w = np.asarray(w, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    inner = (dw * w).sum(axis=1, keepdims=True)
    return w * (dw - inner)


def attend_batch(q, k, v, n_heads):
    """Scaled dot-product attention over a batch, split into heads.

    q: (B, Tq, D), k/v: (B, Tk, D) with D divisible by n_heads. Scores use
    the 1/sqrt(D/n_heads) scale. Returns (ctx, weights) with ctx (B, Tq, D)
    and weights (B, n_heads, Tq, Tk); each weight row sums to 1.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    b, tq, dim = q.shape
    tk = k.shape[1]
    if dim % n_heads != 0:
        raise ValueError(f"feature dim {dim} not divisible by {n_heads} heads")
    dh = dim // n_heads
    scale = 1.0 / np.sqrt(dh)

    # (B, T, D) -> (B, H, T, dh)
    qh = q.reshape(b, tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, tk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, tk, n_heads, dh).transpose(0, 2, 1, 3)

    scores = np.einsum("bhqd,bhkd->bhqk", qh, kh) * scale
    flat = softmax_rows(scores.reshape(-1, tk))
    weights = flat.reshape(b, n_heads, tq, tk)
    ctx_h = np.einsum("bhqk,bhkd->bhqd", weights, vh)
    ctx = ctx_h.transpose(0, 2, 1, 3).reshape(b, tq, dim)
    return ctx, weights


def true_match_ranks(sim):
    """Rank (1-based) of the diagonal entry within each row of a square
    similarity matrix, ordering candidates by descending similarity with
    ties broken by smaller candidate index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    diag = np.diagonal(sim)
    better = (sim > diag[:, None]).sum(axis=1)
    idx = np.arange(n)
    tied_before = ((sim == diag[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return (1 + better + tied_before).astype(np.int64)
