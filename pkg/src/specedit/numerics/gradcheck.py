"""Finite-difference gradient checking for the autodiff substrate.

The harness compares reverse-mode gradients of a scalar-valued function
against central differences coordinate by coordinate and reports the worst
relative error |analytic - fd| / max(1, |analytic|). It is the independent
oracle for every backward rule in this package, so it must never call into
the backward machinery itself except through `Tensor.backward()`.
"""

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def grad_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f takes one Tensor and returns a scalar Tensor; x is perturbed in place
    coordinate by coordinate (a copy is used, the caller's array is safe).
    h should sit in [1e-5, 1e-3]: small enough for the quadratic term,
    large enough to survive rounding at the working precision.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ContractError(f"grad_check: step {h} outside [1e-5, 1e-3]")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.astype(x.data.dtype), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar Tensor")
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.astype(np.float64)

    flat = base.reshape(-1)
    fd = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = base.copy().reshape(-1)
            probe[i] += sign * h
            val = f(Tensor(probe.reshape(base.shape).astype(x.data.dtype))).item()
            fd[i] += sign * val
        fd[i] /= 2.0 * h

    err = np.abs(analytic.reshape(-1) - fd)
    rel = err / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(rel.max()) if rel.size else 0.0


def grad_check_multi(f, xs, h=1e-4):
    """Run grad_check over several leaf tensors of an n-ary scalar function.

    Returns the max relative error across all inputs. f receives the full
    list each call; one leaf is swapped for the probe at a time.
    """
    worst = 0.0
    for i in range(len(xs)):
        def partial(t, i=i):
            args = list(xs)
            args[i] = t
            return f(args)
        worst = max(worst, grad_check(partial, xs[i], h=h))
    return worst
