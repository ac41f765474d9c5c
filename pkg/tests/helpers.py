"""Shared numeric test utilities (finite-difference gradient checking)."""

import numpy as np

REL_TOL = 1e-4
ZERO_FLOOR = 1e-7  # below this both sides are just FD noise


def relative_errors(analytic, numeric):
    """Elementwise relative error with a floor for near-zero pairs."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > ZERO_FLOOR, err / np.maximum(scale, 1e-300), 0.0)
    tiny_ok = (scale <= ZERO_FLOOR) & (err <= ZERO_FLOOR)
    rel = np.where(tiny_ok, 0.0, rel)
    return rel


def finite_difference_check(loss_fn, params, analytic_grads, h=1e-5, rel_tol=REL_TOL,
                            sample_per_block=None, rng=None):
    # h = 1e-5 balances truncation (~h^2) against float64 roundoff (~eps/h)
    # for losses of order 1; 1e-6 lets roundoff dominate on tiny gradients.
    """Central-difference check of analytic gradients, block by block.

    loss_fn(params) -> float must be deterministic. Checks every element
    unless sample_per_block caps the count (sampled with the given rng).
    Returns {block: worst relative error}; raises AssertionError on failure.
    """
    worst = {}
    for name in sorted(params):
        block = params[name]
        flat = block.ravel()
        grad = analytic_grads[name].ravel()
        if sample_per_block is not None and flat.size > sample_per_block:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, sample_per_block, replace=False)
        else:
            idx = range(flat.size)
        fd = np.zeros(len(list(idx)))
        an = np.zeros_like(fd)
        for pos, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            fd[pos] = (up - down) / (2.0 * h)
            an[pos] = grad[i]
        rel = relative_errors(an, fd)
        worst[name] = float(rel.max()) if rel.size else 0.0
        bad = np.nonzero(rel > rel_tol)[0]
        assert bad.size == 0, (
            f"{name}: {bad.size} elements exceed rel tol {rel_tol}"
            f" (worst {rel.max():.2e}, analytic {an[bad[0]]:.3e} vs fd {fd[bad[0]]:.3e})"
        )
    return worst
