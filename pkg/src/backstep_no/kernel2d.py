"""Backstepping kernel k(x, y) for the hyperbolic PIDE

    u_t = u_x + g(x) u(0, t) + int_0^x f(x, y) u(y, t) dy,

on the triangle T = {0 <= y <= x <= 1}. The kernel is the fixed point of
k = F0 + F(g, f, k) with

    F0(x, y)       = -g(x - y) - int_0^y f(x - y + xi, xi) dxi
    F(g, f, k)(x, y) = int_0^{x-y} g(xi) k(x - y, xi) dxi
                     + int_0^y int_0^{x-y} f(xi + eta, eta) k(x - y + eta, xi + eta) dxi deta

All integrals use the trapezoid rule on the grid. The double integral is
evaluated inner (xi) first, then outer (eta). Substituting s = xi + eta
turns the inner integral into S(r, e) = int_{y_e}^{x_r} f(s, y_e) k(x_r, s) ds,
which is one matrix product per sweep.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonConvergenceError
from .grid import (
    GridFunction1D,
    TriangularGridFunction,
    check_same_grid,
    cumulative_trapezoid_rows,
    diagonal_lines,
    from_diagonal_lines,
)
from .kernel1d import DEFAULT_CONFIG, KernelSolveConfig


def _lower(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _diff_index(n: int) -> np.ndarray:
    i, j = np.indices((n, n))
    return np.clip(i - j, 0, None)


def _segment_integral(left: np.ndarray, right: np.ndarray, h: float) -> np.ndarray:
    """T[r, e] = trapezoid of left[r, s] * right[s, e] for s from e to r.

    ``left`` and ``right`` are dense lower-triangular arrays (zero above the
    diagonal), so the full product already restricts s to [e, r]; only the
    end-point half weights need correcting.
    """
    full = left @ right
    out = full - 0.5 * left * np.diagonal(right)[None, :] - 0.5 * np.diagonal(left)[:, None] * right
    return h * np.tril(out)


def _free_term(g: np.ndarray, f: np.ndarray, h: float) -> np.ndarray:
    n = g.shape[0]
    along = from_diagonal_lines(cumulative_trapezoid_rows(diagonal_lines(f), h))
    return (-g[_diff_index(n)] - along) * _lower(n)


def _apply_operator(g: np.ndarray, f: np.ndarray, k: np.ndarray, h: float) -> np.ndarray:
    """F(g, f, k) on the dense lower triangle."""
    n = g.shape[0]
    # int_0^{x_d} g(xi) k(x_d, xi) dxi, indexed by d = i - j
    gk = h * (k @ g - 0.5 * g[0] * k[:, 0] - 0.5 * g * np.diagonal(k))
    inner = _segment_integral(k, f, h)
    outer = from_diagonal_lines(cumulative_trapezoid_rows(diagonal_lines(inner), h))
    return (gk[_diff_index(n)] + outer) * _lower(n)


def _as_arrays(g: GridFunction1D, f: TriangularGridFunction):
    n = check_same_grid(g, f)
    return g.values.copy(), f.to_dense(), 1.0 / n, n


def solve_kernel_2d(
    g: GridFunction1D, f: TriangularGridFunction, cfg: KernelSolveConfig = DEFAULT_CONFIG
) -> TriangularGridFunction:
    """Successive approximation k_{m+1} = F0 + F(g, f, k_m), Jacobi style."""
    gv, fv, h, n = _as_arrays(g, f)
    f0 = _free_term(gv, fv, h)
    k = f0.copy()
    for _ in range(cfg.max_terms):
        k_next = f0 + _apply_operator(gv, fv, k, h)
        inc = np.max(np.abs(k_next - k))
        k = k_next
        if inc < cfg.tolerance:
            return TriangularGridFunction.from_dense(k)
    raise NonConvergenceError(
        f"2D kernel: increment {inc:.3e} above {cfg.tolerance:.1e} after {cfg.max_terms} sweeps"
    )


def residual_2d(g: GridFunction1D, f: TriangularGridFunction, k: TriangularGridFunction) -> float:
    gv, fv, h, n = _as_arrays(g, f)
    check_same_grid(g, k)
    kd = k.to_dense()
    r = kd - _free_term(gv, fv, h) - _apply_operator(gv, fv, kd, h)
    return float(np.max(np.abs(np.tril(r))))


# --- partial derivatives -------------------------------------------------

def _fd_along(values: np.ndarray, h: float) -> np.ndarray:
    """Second-order derivative of samples along a line with spacing h (len >= 3)."""
    d = np.empty_like(values)
    d[1:-1] = (values[2:] - values[:-2]) / (2 * h)
    d[0] = (-3 * values[0] + 4 * values[1] - values[2]) / (2 * h)
    d[-1] = (3 * values[-1] - 4 * values[-2] + values[-3]) / (2 * h)
    return d


def _partials_by_quadratic_fit(k: np.ndarray, h: float):
    # n_cells == 2: the 6 nodes determine a unique quadratic in (x, y).
    i, j = np.tril_indices(3)
    x, y = i * h, j * h
    A = np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])
    c = np.linalg.solve(A, k[i, j])
    kx = np.zeros_like(k)
    ky = np.zeros_like(k)
    kx[i, j] = c[1] + 2 * c[3] * x + c[4] * y
    ky[i, j] = c[2] + c[4] * x + 2 * c[5] * y
    return kx, ky


def kernel_partials(k: TriangularGridFunction) -> tuple[TriangularGridFunction, TriangularGridFunction]:
    """Finite-difference k_x and k_y on the triangle.

    Columns (fixed y) give k_x and rows (fixed x) give k_y, central inside and
    one-sided second order at the ends. Where a column or row has fewer than
    three nodes (near the corners), the derivative along the diagonal x - y =
    const supplies k_x + k_y and the missing partial is taken from it.
    """
    n = k.n_cells
    if n < 2:
        raise ValueError("kernel_partials needs n_cells >= 2")
    h = k.h
    kd = k.to_dense()
    if n == 2:
        kx, ky = _partials_by_quadratic_fit(kd, h)
        return TriangularGridFunction.from_dense(kx), TriangularGridFunction.from_dense(ky)

    kx = np.full_like(kd, np.nan)
    ky = np.full_like(kd, np.nan)
    for j in range(n - 1):  # columns with >= 3 nodes
        kx[j:, j] = _fd_along(kd[j:, j], h)
    for i in range(2, n + 1):  # rows with >= 3 nodes
        ky[i, :i + 1] = _fd_along(kd[i, :i + 1], h)
    lines = diagonal_lines(kd)
    diag = np.full_like(kd, np.nan)
    for d in (0, 1):  # only lines through the short rows/columns are needed
        e = np.arange(n + 1 - d)
        diag[e + d, e] = _fd_along(lines[d, :n + 1 - d], h)
    tri = np.tril(np.ones_like(kd, dtype=bool))
    missing_x = np.isnan(kx) & tri
    kx[missing_x] = diag[missing_x] - ky[missing_x]
    missing_y = np.isnan(ky) & tri
    ky[missing_y] = diag[missing_y] - kx[missing_y]
    return TriangularGridFunction.from_dense(kx), TriangularGridFunction.from_dense(ky)


def bounds_2d(g_bar: float, gprime_bar: float, f_bar: float, fx_bar: float):
    """(k_bar, kx_bar, ky_bar, phi0_bar) bounding |k|, |k_x|, |k_y| and |phi_0| on T."""
    for v in (g_bar, gprime_bar, f_bar, fx_bar):
        if v < 0:
            raise ValueError("bounds must be nonnegative")
    s = g_bar + f_bar
    k_bar = s * math.exp(s)
    phi0_bar = gprime_bar + s * k_bar
    kx_bar = (fx_bar + phi0_bar) * math.exp(s)
    ky_bar = fx_bar + f_bar * k_bar + phi0_bar + s * kx_bar
    return k_bar, kx_bar, ky_bar, phi0_bar


def solve_inverse_kernel_2d(
    k_hat: TriangularGridFunction, cfg: KernelSolveConfig = DEFAULT_CONFIG
) -> TriangularGridFunction:
    """Fixed point of l(x, y) = k(x, y) + int_y^x k(x, xi) l(xi, y) dxi."""
    kd = k_hat.to_dense()
    h = k_hat.h
    l = kd.copy()
    for _ in range(cfg.max_terms):
        l_next = kd + _segment_integral(kd, l, h)
        inc = np.max(np.abs(l_next - l))
        l = l_next
        if inc < cfg.tolerance:
            return TriangularGridFunction.from_dense(l)
    raise NonConvergenceError(
        f"2D inverse kernel: increment {inc:.3e} above {cfg.tolerance:.1e} after {cfg.max_terms} sweeps"
    )
