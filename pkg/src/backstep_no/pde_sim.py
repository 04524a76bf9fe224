"""Closed-loop simulation of the transport plant and the hyperbolic PIDE.

Both plants move at unit speed towards x = 0. With dt = h the transport part
is an exact index shift. The remaining source terms (recirculation of the
outlet value, and the Volterra term for the PIDE) are integrated along each
characteristic with the trapezoid rule. The only implicit unknown, the new
outlet value u(0, t_{n+1}), is a scalar for the transport plant and a
triangular solve for the PIDE.

The boundary value u(1, t) = U(t) is computed from the newly shifted state.
Linear kernel feedbacks involve u(1, t) itself through the quadrature end
weight, and that scalar equation is solved exactly. This keeps
u(1) - int k(1 - y) u(y) dy at zero, so the target-system boundary holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import GridMismatchError, SimulationDivergedError
from .grid import (
    GridFunction1D,
    TriangularGridFunction,
    check_same_grid,
    convolve,
    l2_norm_array,
    trapezoid_weights,
)


def default_initial_condition(n_cells: int) -> GridFunction1D:
    """u0(x) = sin(pi x) + 1."""
    return GridFunction1D.from_callable(lambda x: np.sin(np.pi * x) + 1.0, n_cells)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    n_cells: int
    n_steps: int
    dt: float
    states: np.ndarray
    controls: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isclose(self.dt, 1.0 / self.n_cells, rtol=0, atol=1e-15):
            raise ValueError("dt must equal the grid spacing")
        if self.states.shape != (self.n_steps + 1, self.n_cells + 1):
            raise ValueError(f"states has shape {self.states.shape}")
        if self.controls.shape != (self.n_steps + 1,):
            raise ValueError(f"controls has shape {self.controls.shape}")
        if not np.array_equal(self.states[:, -1], self.controls):
            raise ValueError("boundary value u(1, t_n) must equal the control U(t_n)")
        self.states.setflags(write=False)
        self.controls.setflags(write=False)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)

    def l2_norms(self) -> np.ndarray:
        return l2_norm_array(self.states, self.n_cells)

    def state(self, n: int) -> GridFunction1D:
        return GridFunction1D(self.n_cells, self.states[n])


# --- feedback laws -------------------------------------------------------

def control_1d(k: GridFunction1D, u: GridFunction1D) -> float:
    """Trapezoid value of int_0^1 k(1 - y) u(y) dy."""
    n = check_same_grid(k, u)
    return float(trapezoid_weights(n) @ (k.values[::-1] * u.values))


def control_2d(k: TriangularGridFunction, u: GridFunction1D) -> float:
    """Trapezoid value of int_0^1 k(1, y) u(y) dy."""
    n = check_same_grid(k, u)
    return float(trapezoid_weights(n) @ (k.row(n) * u.values))


def _implicit_boundary(gain_row: np.ndarray, u: np.ndarray, w: np.ndarray) -> float:
    # U = sum_j w_j a_j u_j with u_N = U  =>  U (1 - w_N a_N) = sum_{j<N} w_j a_j u_j
    partial = float(w[:-1] @ (gain_row[:-1] * u[:-1]))
    return partial / (1.0 - w[-1] * gain_row[-1])


class Controller:
    """Boundary feedback U = ctrl(u, outlets, controls).

    ``u`` is the current state; its last entry is provisional and should not
    be trusted. ``outlets`` holds u(0, t_0..t_n), ``controls`` holds
    U(t_0..t_{n-1}).
    """

    n_cells: int | None = None

    def reset(self):
        pass

    def __call__(self, u: np.ndarray, outlets: Sequence[float], controls: Sequence[float]) -> float:
        raise NotImplementedError


class OpenLoop(Controller):
    def __call__(self, u, outlets, controls):
        return 0.0


class GainKernel(Controller):
    """U = int_0^1 k(1 - y) u(y) dy."""

    def __init__(self, k: GridFunction1D):
        self.k = k
        self.n_cells = k.n_cells
        self._row = k.values[::-1].copy()
        self._w = trapezoid_weights(k.n_cells)

    def __call__(self, u, outlets, controls):
        return _implicit_boundary(self._row, u, self._w)


class GainKernel2D(Controller):
    """U = int_0^1 k(1, y) u(y) dy."""

    def __init__(self, k: TriangularGridFunction):
        self.k = k
        self.n_cells = k.n_cells
        self._row = k.row(k.n_cells).copy()
        self._w = trapezoid_weights(k.n_cells)

    def __call__(self, u, outlets, controls):
        return _implicit_boundary(self._row, u, self._w)


class NeuralFeedback(Controller):
    """U = network(beta, u), the learned full feedback-law map."""

    def __init__(self, params, beta: GridFunction1D):
        from .neural_operator import feedback_forward, sensor_stride

        self.params = params
        self.beta = beta
        self.n_cells = beta.n_cells
        self._stride = sensor_stride(params.n_u_sensors - 1, beta.n_cells)
        self._beta_sensors = params.sample_beta(beta)
        self._forward = feedback_forward

    def __call__(self, u, outlets, controls):
        return float(self._forward(self.params, self._beta_sensors, u[::self._stride]))


class ObserverBased(Controller):
    """Kernel feedback applied to the outlet-driven observer state."""

    def __init__(self, k: GridFunction1D, beta: GridFunction1D, u0_guess: GridFunction1D | None = None):
        self.n_cells = check_same_grid(k, beta)
        self.gain = GainKernel(k)
        self.beta = beta
        self.u0_guess = u0_guess if u0_guess is not None else GridFunction1D.constant(0.0, self.n_cells)
        self.estimates: list[np.ndarray] = []

    def reset(self):
        self.estimates = []

    def __call__(self, u, outlets, controls):
        n = len(outlets) - 1
        est = _observer_values(self.beta.values, list(controls) + [0.0], outlets, n, self.u0_guess.values)
        U = self.gain(est, outlets, controls)
        est[-1] = U
        self.estimates.append(est)
        return U


def _observer_values(beta, controls, outlets, n, guess) -> np.ndarray:
    N = beta.shape[0] - 1
    h = 1.0 / N
    out = np.array(guess, dtype=np.float64, copy=True)
    outlets = np.asarray(outlets, dtype=np.float64)
    for i in range(N + 1):
        m = n + i - N
        if m < 0:
            continue
        if m == n:
            out[i] = controls[m]
            continue
        q = np.arange(m, n + 1)
        integrand = beta[i + n - q] * outlets[q]
        out[i] = controls[m] + h * (integrand.sum() - 0.5 * (integrand[0] + integrand[-1]))
    return out


def observer_state(
    beta: GridFunction1D,
    control_history: Sequence[float],
    outlet_history: Sequence[float],
    t_index: int,
    u0_guess: GridFunction1D | None = None,
) -> GridFunction1D:
    """Explicit-solution observer driven by U and u(0, .).

    For t + x >= 1 the estimate is U(t + x - 1) plus the recirculated outlet
    history over [t + x - 1, t]; elsewhere it is the initial guess.
    """
    N = beta.n_cells
    if len(outlet_history) < t_index + 1 or len(control_history) < t_index + 1:
        raise ValueError(
            f"observer at step {t_index} needs {t_index + 1} samples of U and u(0); "
            f"got {len(control_history)} and {len(outlet_history)}"
        )
    guess = u0_guess.values if u0_guess is not None else np.zeros(N + 1)
    if u0_guess is not None:
        check_same_grid(beta, u0_guess)
    return GridFunction1D(N, _observer_values(beta.values, control_history, outlet_history, t_index, guess))


# --- transforms ----------------------------------------------------------

def forward_transform(k: GridFunction1D, u: GridFunction1D) -> GridFunction1D:
    """w = u - k * u."""
    return u - convolve(k, u)


def inverse_transform(l: GridFunction1D, w: GridFunction1D) -> GridFunction1D:
    """u = w + l * w."""
    return w + convolve(l, w)


def volterra_matrix(k: TriangularGridFunction) -> np.ndarray:
    """M with (M @ u)[i] = trapezoid of int_0^{x_i} k(x_i, y) u(y) dy."""
    n = k.n_cells
    m = k.to_dense() * k.h
    m[:, 0] *= 0.5
    idx = np.arange(n + 1)
    m[idx, idx] *= 0.5
    m[0, 0] = 0.0
    return m


def forward_transform_2d(k: TriangularGridFunction, u: GridFunction1D) -> GridFunction1D:
    check_same_grid(k, u)
    return GridFunction1D(u.n_cells, u.values - volterra_matrix(k) @ u.values)


def inverse_transform_2d(l: TriangularGridFunction, w: GridFunction1D) -> GridFunction1D:
    check_same_grid(l, w)
    return GridFunction1D(w.n_cells, w.values + volterra_matrix(l) @ w.values)


# --- time stepping -------------------------------------------------------

def _n_steps(t_final: float, n_cells: int) -> int:
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    return int(round(t_final * n_cells))


def _check_controller(ctrl: Controller, n_cells: int):
    if ctrl.n_cells is not None and ctrl.n_cells != n_cells:
        raise GridMismatchError(f"controller grid {ctrl.n_cells} != plant grid {n_cells}")


def _run(step, u0: np.ndarray, ctrl: Controller, n_steps: int, n_cells: int, meta: dict) -> TrajectoryRecord:
    ctrl.reset()
    states = np.empty((n_steps + 1, n_cells + 1))
    controls = np.empty(n_steps + 1)
    outlets: list[float] = []
    u = u0.copy()
    outlets.append(float(u[0]))
    u[-1] = ctrl(u, outlets, controls[:0])
    states[0], controls[0] = u, u[-1]
    for n in range(n_steps):
        u_next = step(u)
        u_next[-1] = controls[n]  # provisional, replaced below
        outlets.append(float(u_next[0]))
        u_next[-1] = ctrl(u_next, outlets, controls[:n + 1])
        if not np.all(np.isfinite(u_next)):
            raise SimulationDivergedError(f"state is no longer finite at t = {(n + 1) / n_cells:.4f}")
        u = u_next
        states[n + 1], controls[n + 1] = u, u[-1]
    return TrajectoryRecord(n_cells, n_steps, 1.0 / n_cells, states, controls, meta)


def simulate_transport(
    beta: GridFunction1D, u0: GridFunction1D, ctrl: Controller, t_final: float
) -> TrajectoryRecord:
    """u_t = u_x + beta(x) u(0, t), u(1, t) = U(t)."""
    n = check_same_grid(beta, u0)
    _check_controller(ctrl, n)
    h = 1.0 / n
    b = beta.values
    denom = 1.0 - 0.5 * h * b[0]

    def step(u):
        out = np.empty_like(u)
        outlet = (u[1] + 0.5 * h * b[1] * u[0]) / denom
        out[:-1] = u[1:] + 0.5 * h * (b[1:] * u[0] + b[:-1] * outlet)
        return out

    return _run(step, u0.values, ctrl, _n_steps(t_final, n), n,
                {"plant": "transport"})


def simulate_pide(
    g: GridFunction1D, f: TriangularGridFunction, u0: GridFunction1D, ctrl: Controller, t_final: float
) -> TrajectoryRecord:
    """u_t = u_x + g(x) u(0, t) + int_0^x f(x, y) u(y, t) dy, u(1, t) = U(t)."""
    n = check_same_grid(g, f, u0)
    _check_controller(ctrl, n)
    h = 1.0 / n
    source = volterra_matrix(f)
    source[:, 0] += g.values
    lhs = np.eye(n) - 0.5 * h * source[:n, :n]

    def step(u):
        out = np.empty_like(u)
        rhs = u[1:] + 0.5 * h * (source @ u)[1:]
        out[:-1] = solve_triangular(lhs, rhs, lower=True)
        return out

    return _run(step, u0.values, ctrl, _n_steps(t_final, n), n, {"plant": "pide"})
