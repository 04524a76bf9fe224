"""Gain kernel of the transport plant with recirculation.

The kernel solves k = -beta + beta * k (``*`` is the one-sided convolution on
[0, x]). It is built as the series k = sum_n dk_n with dk_0 = -beta and
dk_{n+1} = beta * dk_n, whose terms decay factorially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonConvergenceError
from .grid import GridFunction1D, check_same_grid, convolution_matrix, sup_norm


@dataclass(frozen=True)
class KernelSolveConfig:
    tolerance: float = 1e-10
    max_terms: int = 200

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_terms < 1:
            raise ValueError("max_terms must be at least 1")


DEFAULT_CONFIG = KernelSolveConfig()


def _sum_series(first: np.ndarray, step: np.ndarray, cfg: KernelSolveConfig, what: str):
    term = first.copy()
    total = first.copy()
    for _ in range(cfg.max_terms):
        if np.max(np.abs(term)) < cfg.tolerance:
            return total
        term = step @ term
        total += term
    raise NonConvergenceError(
        f"{what}: increment {np.max(np.abs(term)):.3e} still above "
        f"{cfg.tolerance:.1e} after {cfg.max_terms} terms"
    )


def series_terms(beta: GridFunction1D, n_terms: int) -> list[GridFunction1D]:
    """The first ``n_terms`` increments dk_0, dk_1, ... of the kernel series."""
    step = convolution_matrix(beta.values, beta.h)
    term = -beta.values
    out = []
    for _ in range(n_terms):
        out.append(GridFunction1D(beta.n_cells, term))
        term = step @ term
    return out


def solve_kernel(beta: GridFunction1D, cfg: KernelSolveConfig = DEFAULT_CONFIG) -> GridFunction1D:
    step = convolution_matrix(beta.values, beta.h)
    k = _sum_series(-beta.values, step, cfg, "kernel series")
    return GridFunction1D(beta.n_cells, k)


def residual_1d(beta: GridFunction1D, k: GridFunction1D) -> float:
    """sup |k + beta - beta * k| over the grid."""
    check_same_grid(beta, k)
    conv = convolution_matrix(beta.values, beta.h) @ k.values
    return float(np.max(np.abs(k.values + beta.values - conv)))


def kernel_sup_bound(beta_bar: float) -> float:
    """Series bound on sup|k| for sup|beta| <= beta_bar."""
    if beta_bar < 0:
        raise ValueError("beta_bar must be nonnegative")
    return beta_bar * math.exp(beta_bar)


def lipschitz_bound(B: float) -> float:
    """Lipschitz constant of beta -> k on the ball sup|beta| <= B."""
    if B < 0:
        raise ValueError("B must be nonnegative")
    return math.exp(3.0 * B)


def solve_inverse_kernel(
    beta: GridFunction1D, delta: GridFunction1D, cfg: KernelSolveConfig = DEFAULT_CONFIG
) -> GridFunction1D:
    """Fixed point of l = -beta + delta + delta * l.

    ``delta`` is the perturbation produced by an approximate kernel (see
    ``stability.delta_from_tilde``); with delta = 0 the result is exactly -beta.
    """
    n = check_same_grid(beta, delta)
    step = convolution_matrix(delta.values, delta.h)
    first = -beta.values + delta.values
    return GridFunction1D(n, _sum_series(first, step, cfg, "inverse kernel series"))


def perturbation_gap(
    beta1: GridFunction1D, beta2: GridFunction1D, cfg: KernelSolveConfig = DEFAULT_CONFIG
) -> tuple[float, float]:
    """(sup|K(beta1) - K(beta2)|, e^{3B} sup|beta1 - beta2|) with B the larger sup-norm."""
    check_same_grid(beta1, beta2)
    gap = sup_norm(solve_kernel(beta1, cfg) - solve_kernel(beta2, cfg))
    B = max(sup_norm(beta1), sup_norm(beta2))
    return gap, lipschitz_bound(B) * sup_norm(beta1 - beta2)
