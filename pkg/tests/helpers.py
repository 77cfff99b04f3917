"""Shared test utilities: central finite differences against tape gradients."""
from __future__ import annotations

import numpy as np

from pretram.diffcore import Tensor


def numeric_grad(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar f(*arrays) with respect to every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = f(*arrays)
            arr[idx] = old - h
            down = f(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_grads(build, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences.

    build maps Tensors to a scalar Tensor; arrays must be float64.
    """

    def value(*arrs):
        return float(build(*[Tensor(a.copy()) for a in arrs]).data)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    numeric = numeric_grad(value, [a.copy() for a in arrays], h)
    return max(rel_error(leaf.grad, n) for leaf, n in zip(leaves, numeric))


# one "CRITERION n PASS/FAIL" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
