"""Finite-difference validation of analytic gradients.

Central differences with configurable eps; relative error uses
max(|analytic|, |numeric|, 1e-8) as the denominator so zero gradients
compare cleanly.
"""

from __future__ import annotations

import numpy as np

from ..errors import InputError
from .tensor import Parameter, no_grad


def finite_diff_check(loss_fn, params, eps: float = 1e-4,
                      max_coords_per_param: int = 24, seed: int = 0) -> float:
    """Return the max relative error between analytic and numeric grads.

    loss_fn: zero-arg callable rebuilding the loss from current values.
    Checks every coordinate of small parameters and a seeded subsample
    of large ones.
    """
    params = list(params)
    if not params:
        raise InputError("finite_diff_check needs parameters")
    if eps <= 0:
        raise InputError("eps must be positive")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.data.ndim != 0:
        raise InputError("loss_fn must return a scalar")
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                hi = float(loss_fn().data)
            flat[c] = orig - eps
            with no_grad():
                lo = float(loss_fn().data)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(a_flat[c] - numeric) / max(abs(a_flat[c]), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
