"""Uniform grids on [0, 1] and on the triangle 0 <= y <= x <= 1.

Everything downstream integrates with the composite trapezoid rule on these
grids, so the helpers here (weights, convolution matrices, diagonal
cumulative integrals) are the shared numerical core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GridMismatchError


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridFunction1D:
    """Samples of a function at x_i = i / n_cells, i = 0..n_cells."""

    n_cells: int
    values: np.ndarray

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise ValueError(f"n_cells must be a positive integer, got {self.n_cells}")
        vals = _frozen(self.values)
        if vals.shape != (self.n_cells + 1,):
            raise ValueError(
                f"expected {self.n_cells + 1} values, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "n_cells", int(self.n_cells))
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], n_cells: int):
        x = np.linspace(0.0, 1.0, n_cells + 1)
        return cls(n_cells, np.broadcast_to(fn(x), x.shape))

    @classmethod
    def constant(cls, c: float, n_cells: int):
        return cls(n_cells, np.full(n_cells + 1, float(c)))

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)

    def _check(self, other: GridFunction1D):
        if other.n_cells != self.n_cells:
            raise GridMismatchError(f"n_cells {self.n_cells} != {other.n_cells}")

    def __add__(self, other):
        if isinstance(other, GridFunction1D):
            self._check(other)
            return GridFunction1D(self.n_cells, self.values + other.values)
        return GridFunction1D(self.n_cells, self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction1D):
            self._check(other)
            return GridFunction1D(self.n_cells, self.values - other.values)
        return GridFunction1D(self.n_cells, self.values - other)

    def __mul__(self, scalar: float):
        return GridFunction1D(self.n_cells, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction1D(self.n_cells, -self.values)

    def restrict(self, stride: int) -> GridFunction1D:
        """Subsample onto the grid with n_cells / stride cells."""
        if self.n_cells % stride:
            raise GridMismatchError(f"stride {stride} does not divide {self.n_cells}")
        return GridFunction1D(self.n_cells // stride, self.values[::stride])


def n_triangle_points(n_cells: int) -> int:
    return (n_cells + 1) * (n_cells + 2) // 2


@dataclass(frozen=True, eq=False)
class TriangularGridFunction:
    """Samples at (x_i, y_j), 0 <= j <= i <= n_cells, packed row by row.

    Entry (i, j) lives at flat index i*(i+1)/2 + j, which is the order
    produced by ``np.tril_indices``.
    """

    n_cells: int
    values: np.ndarray

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise ValueError(f"n_cells must be a positive integer, got {self.n_cells}")
        vals = _frozen(self.values)
        expected = n_triangle_points(self.n_cells)
        if vals.shape != (expected,):
            raise ValueError(f"expected {expected} packed values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "n_cells", int(self.n_cells))
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_dense(cls, dense: np.ndarray):
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0] - 1
        if dense.shape != (n + 1, n + 1):
            raise ValueError(f"dense array must be square, got {dense.shape}")
        return cls(n, dense[np.tril_indices(n + 1)])

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], n_cells: int):
        xx, yy = triangle_points(n_cells).T
        return cls(n_cells, np.broadcast_to(fn(xx, yy), xx.shape))

    @classmethod
    def constant(cls, c: float, n_cells: int):
        return cls(n_cells, np.full(n_triangle_points(n_cells), float(c)))

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        if not (0 <= j <= i <= self.n_cells):
            raise IndexError(f"({i}, {j}) is outside the triangle 0 <= j <= i <= {self.n_cells}")
        return float(self.values[i * (i + 1) // 2 + j])

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        n = self.n_cells + 1
        out = np.full((n, n), fill, dtype=np.float64)
        out[np.tril_indices(n)] = self.values
        return out

    def row(self, i: int) -> np.ndarray:
        start = i * (i + 1) // 2
        return self.values[start:start + i + 1]

    def __sub__(self, other: TriangularGridFunction):
        if other.n_cells != self.n_cells:
            raise GridMismatchError(f"n_cells {self.n_cells} != {other.n_cells}")
        return TriangularGridFunction(self.n_cells, self.values - other.values)

    def __add__(self, other: TriangularGridFunction):
        if other.n_cells != self.n_cells:
            raise GridMismatchError(f"n_cells {self.n_cells} != {other.n_cells}")
        return TriangularGridFunction(self.n_cells, self.values + other.values)

    def restrict(self, stride: int) -> TriangularGridFunction:
        if self.n_cells % stride:
            raise GridMismatchError(f"stride {stride} does not divide {self.n_cells}")
        return TriangularGridFunction.from_dense(self.to_dense()[::stride, ::stride])


def triangle_points(n_cells: int) -> np.ndarray:
    """(x, y) coordinates of the packed triangle nodes, shape (P, 2)."""
    i, j = np.tril_indices(n_cells + 1)
    return np.column_stack([i, j]) / n_cells


def check_same_grid(*fns) -> int:
    n = fns[0].n_cells
    for f in fns[1:]:
        if f.n_cells != n:
            raise GridMismatchError(f"grid functions live on different grids: {n} vs {f.n_cells}")
    return n


# --- quadrature ---------------------------------------------------------

def trapezoid_weights(n_cells: int, upper_index: int | None = None) -> np.ndarray:
    """Weights w with sum(w * f[:upper+1]) = trapezoid integral from 0 to x_upper."""
    upper = n_cells if upper_index is None else upper_index
    w = np.full(upper + 1, 1.0 / n_cells)
    if upper == 0:
        return np.zeros(1)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def trapezoid_integrate(f: GridFunction1D, upper_index: int) -> float:
    if not (0 <= upper_index <= f.n_cells):
        raise IndexError(f"upper_index {upper_index} outside [0, {f.n_cells}]")
    w = trapezoid_weights(f.n_cells, upper_index)
    return float(w @ f.values[:upper_index + 1])


def convolution_matrix(a: np.ndarray, h: float) -> np.ndarray:
    """Lower-triangular M with (M @ b)[i] = trapezoid value of int_0^{x_i} a(x_i - y) b(y) dy."""
    n = a.shape[0]
    i, j = np.tril_indices(n)
    m = np.zeros((n, n))
    m[i, j] = a[i - j]
    m *= h
    m[:, 0] *= 0.5
    diag = np.arange(n)
    m[diag, diag] *= 0.5
    m[0, 0] = 0.0
    return m


def convolve(a: GridFunction1D, b: GridFunction1D) -> GridFunction1D:
    """(a * b)(x) = int_0^x a(x - y) b(y) dy on the shared grid."""
    n = check_same_grid(a, b)
    return GridFunction1D(n, convolution_matrix(a.values, 1.0 / n) @ b.values)


def sup_norm(f: GridFunction1D | TriangularGridFunction) -> float:
    return float(np.max(np.abs(f.values)))


def l2_norm(f: GridFunction1D) -> float:
    return float(np.sqrt(trapezoid_weights(f.n_cells) @ (f.values ** 2)))


def l2_norm_array(u: np.ndarray, n_cells: int) -> np.ndarray:
    """Row-wise L2[0,1] norms of a (T, n_cells+1) array of grid samples."""
    return np.sqrt((np.atleast_2d(u) ** 2) @ trapezoid_weights(n_cells))


# --- triangle helpers ----------------------------------------------------
# Dense (n+1, n+1) arrays with entry [i, j] = value at (x_i, y_j); only the
# lower triangle is meaningful.

def diagonal_lines(dense: np.ndarray) -> np.ndarray:
    """D[d, e] = dense[d + e, e]; row d walks the line x - y = d*h from y = 0."""
    n = dense.shape[0]
    out = np.zeros_like(dense)
    for d in range(n):
        out[d, :n - d] = np.diagonal(dense, -d)
    return out


def from_diagonal_lines(lines: np.ndarray) -> np.ndarray:
    n = lines.shape[0]
    out = np.zeros_like(lines)
    for d in range(n):
        e = np.arange(n - d)
        out[e + d, e] = lines[d, :n - d]
    return out


def cumulative_trapezoid_rows(a: np.ndarray, h: float) -> np.ndarray:
    """Cumulative trapezoid integral along axis 1, starting at zero."""
    out = np.zeros_like(a)
    out[:, 1:] = np.cumsum(0.5 * h * (a[:, 1:] + a[:, :-1]), axis=1)
    return out
