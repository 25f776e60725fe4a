"""Shared oracles for the test suite.

The OT oracle solves the 1-D transport problem as a full assignment
problem, so it never assumes that sorting is optimal; the gradient oracle
is plain central differences.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment


def ot_1d_squared_cost(u: np.ndarray, v: np.ndarray) -> float:
    """Mean squared-cost optimal transport between equal-size 1-D samples."""
    cost = (u[:, None] - v[None, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(u))


def central_diff_grad(f, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Elementwise central differences of a scalar function, float64."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.clone().requires_grad_(True)
    out = f(x)
    out.backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float(torch.linalg.norm((a - b).reshape(-1)))
    den = max(float(torch.linalg.norm(a.reshape(-1))), float(torch.linalg.norm(b.reshape(-1))), 1e-12)
    return num / den


def check_gradient(f, x: torch.Tensor, eps: float = 1e-3, tol: float = 1e-2) -> float:
    """Assert analytic vs central-difference gradients agree; returns the error."""
    err = relative_error(analytic_grad(f, x), central_diff_grad(f, x, eps))
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err
