"""Central-difference gradient checking against the autodiff engine."""

import numpy as np

from .tensor import backward


def finite_diff_check(f, params, h=1e-5, n_coords=64, seed=0):
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    the tensors in ``params``. Up to ``n_coords`` coordinates are sampled
    uniformly (without replacement) across all elements of ``params``; each
    is perturbed in place by +-h and restored bit-exactly afterwards.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(int(flat - offsets[which]), p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        f_plus = f().item()
        p.data[idx] = orig - h
        f_minus = f().item()
        p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[which][idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
