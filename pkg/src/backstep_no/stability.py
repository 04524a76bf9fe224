"""Lyapunov functionals, closed-form stability constants and closed-loop checks.

Every experiment returns a ``StabilityReport`` holding the raw series it
judged (norms, V, control errors), the constants it compared them with and
one boolean verdict per check, so a report can be audited from its JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import (
    GridFunction1D,
    TriangularGridFunction,
    check_same_grid,
    convolution_matrix,
    convolve,
    l2_norm_array,
    sup_norm,
    trapezoid_weights,
)
from .kernel1d import DEFAULT_CONFIG, KernelSolveConfig, solve_inverse_kernel, solve_kernel
from .kernel2d import _segment_integral, kernel_partials, solve_inverse_kernel_2d, solve_kernel_2d
from .pde_sim import (
    Controller,
    GainKernel,
    GainKernel2D,
    NeuralFeedback,
    TrajectoryRecord,
    default_initial_condition,
    simulate_pide,
    simulate_transport,
    volterra_matrix,
)


# --- functionals and constants ------------------------------------------

def lyapunov_V(w: GridFunction1D, c: float) -> float:
    """Trapezoid value of int_0^1 e^{cx} w(x)^2 dx."""
    if not c > 0:
        raise ValueError("c must be positive")
    return float(trapezoid_weights(w.n_cells) @ (np.exp(c * w.x) * w.values ** 2))


def _lyapunov_series(states: np.ndarray, n_cells: int, c: float) -> np.ndarray:
    x = np.linspace(0.0, 1.0, n_cells + 1)
    return (states ** 2) @ (trapezoid_weights(n_cells) * np.exp(c * x))


def eps_star(B: float, c: float = 2.0) -> float:
    """Largest kernel error for which the Lyapunov estimate still decays."""
    if B < 0 or not c > 0:
        raise ValueError("need B >= 0 and c > 0")
    return c * math.exp(-c / 2) / (1 + B)


def c_star(c: float, epsilon: float, B: float) -> float:
    """Guaranteed decay rate of V; nonpositive once epsilon reaches eps_star."""
    if not c > 0:
        raise ValueError("c must be positive")
    return c - math.exp(c) / c * epsilon ** 2 * (1 + B) ** 2


def overshoot_M(beta_bar: float, epsilon: float, c: float) -> float:
    if min(beta_bar, epsilon, c) < 0:
        raise ValueError("arguments must be nonnegative")
    d = (1 + beta_bar) * epsilon
    return (1 + (beta_bar + d) * math.exp(d)) * (1 + beta_bar * math.exp(beta_bar)) * math.exp(c / 2)


def feedback_bounds(B_beta: float, B_u: float, c: float, epsilon: float) -> tuple[float, float, float]:
    """(eps_star, B_u0, residual radius) for a learned full feedback law."""
    if not (B_beta > 0 and B_u > 0 and c > 0):
        raise ValueError("B_beta, B_u and c must be positive")
    e = math.exp(c / 2)
    eps_fb = math.sqrt(c) * B_u / (e * (1 + B_beta))
    B_u0 = (B_u / (e * (1 + B_beta)) - epsilon / math.sqrt(c)) / (1 + B_beta * math.exp(B_beta))
    radius = (1 + B_beta) * e / math.sqrt(c) * epsilon
    return eps_fb, B_u0, radius


def feedback_lipschitz(B_beta: float, B_u: float) -> float:
    """Lipschitz constant of (beta, u) -> U on the sup-norm balls."""
    return B_beta * math.exp(B_beta) + B_u * math.exp(3 * B_beta)


def delta_from_tilde(beta: GridFunction1D, k_tilde: GridFunction1D) -> GridFunction1D:
    """delta = -k_tilde + beta * k_tilde."""
    check_same_grid(beta, k_tilde)
    return convolve(beta, k_tilde) - k_tilde


def delta2d(
    g: GridFunction1D,
    f: TriangularGridFunction,
    k_tilde: TriangularGridFunction,
    k_tilde_x: TriangularGridFunction,
    k_tilde_y: TriangularGridFunction,
) -> tuple[GridFunction1D, TriangularGridFunction]:
    """Perturbation terms of the PIDE target system under an approximate kernel."""
    n = check_same_grid(g, f, k_tilde, k_tilde_x, k_tilde_y)
    kt = k_tilde.to_dense()
    delta0 = -kt[:, 0] + volterra_matrix(k_tilde) @ g.values
    shifted = _segment_integral(kt, f.to_dense(), 1.0 / n)
    delta1 = -k_tilde_x.to_dense() - k_tilde_y.to_dense() + shifted
    return GridFunction1D(n, delta0), TriangularGridFunction.from_dense(delta1)


def fit_decay_rate(V_series, dt: float, t_start: float = 0.0, floor: float = 1e-14) -> float:
    """Least-squares rate r in V ~ exp(-r t) over t >= t_start.

    The window ends at the first sample below ``floor``; a finite-time
    settling run therefore reports the rate up to the numerical floor.
    """
    V = np.asarray(V_series, dtype=float)
    t = np.arange(V.size) * dt
    keep = t >= t_start - 1e-12
    V, t = V[keep], t[keep]
    below = np.nonzero(V < floor)[0]
    if below.size:
        V, t = V[:below[0]], t[:below[0]]
    if V.size < 2:
        raise ValueError("fewer than two samples above the floor in the fit window")
    slope = np.polyfit(t, np.log(V), 1)[0]
    return float(-slope)


# --- reports -------------------------------------------------------------

@dataclass
class StabilityBounds:
    B: float
    c: float
    epsilon: float
    beta_bar: float
    eps_star: float
    c_star: float
    M: float
    M_with_B: float
    B_beta: float | None = None
    B_u: float | None = None
    B_u0: float | None = None
    eps_star_fb: float | None = None
    residual_radius: float | None = None
    C_U: float | None = None


@dataclass
class StabilityReport:
    kind: str
    times: np.ndarray
    norms: np.ndarray
    V: np.ndarray
    decay_rate: float
    tail_sup: float
    bounds: StabilityBounds | None
    verdicts: dict[str, bool]
    series: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)
    trajectory: TrajectoryRecord | None = None

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "verdicts": self.verdicts,
            "flags": self.flags,
            "decay_rate": self.decay_rate,
            "tail_sup": self.tail_sup,
            "bounds": None if self.bounds is None else asdict(self.bounds),
            "info": self.info,
            "times": self.times.tolist(),
            "norms": self.norms.tolist(),
            "V": self.V.tolist(),
            "series": {k: np.asarray(v).tolist() for k, v in self.series.items()},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


@dataclass(frozen=True)
class SimConfig:
    t_final: float = 2.0
    c: float = 2.0
    B: float = 6.0
    B_u: float = 6.0
    envelope_slack: float = 0.05
    static_slack: float = 0.01
    tail_start: float = 1.5
    kernel: KernelSolveConfig = DEFAULT_CONFIG

    def __post_init__(self):
        if not (self.t_final > 0 and self.c > 0 and self.B > 0 and self.B_u > 0):
            raise ValueError("t_final, c, B and B_u must be positive")


def _decay_rate_or_nan(V, dt, t_start=0.0) -> float:
    try:
        return fit_decay_rate(V, dt, t_start)
    except ValueError:
        return float("nan")


def _tail(times, values, t_start) -> float:
    sel = times >= t_start - 1e-12
    return float(np.max(values[sel])) if sel.any() else float("nan")


def _resolve_kernel_1d(model_or_k, beta: GridFunction1D) -> GridFunction1D:
    if isinstance(model_or_k, GridFunction1D):
        return model_or_k
    from .neural_operator import DeepONetParams, kernel_from_deeponet

    if isinstance(model_or_k, DeepONetParams):
        return kernel_from_deeponet(model_or_k, beta)
    raise TypeError(f"expected a GridFunction1D kernel or DeepONetParams, got {type(model_or_k).__name__}")


def run_gain_experiment(
    beta: GridFunction1D, model_or_k, cfg: SimConfig = SimConfig(), u0: GridFunction1D | None = None
) -> StabilityReport:
    """Closed loop with an approximate gain kernel, judged against the exact-gain theory."""
    n = beta.n_cells
    beta_bar = sup_norm(beta)
    if beta_bar > cfg.B * (1 + 1e-12):
        raise ValueError(f"sup|beta| = {beta_bar:.3g} exceeds the configured bound B = {cfg.B}")
    u0 = default_initial_condition(n) if u0 is None else u0
    k = solve_kernel(beta, cfg.kernel)
    k_hat = _resolve_kernel_1d(model_or_k, beta)
    check_same_grid(beta, k_hat, u0)
    k_tilde = k - k_hat
    eps = sup_norm(k_tilde)
    c = cfg.c
    bounds = StabilityBounds(
        B=cfg.B, c=c, epsilon=eps, beta_bar=beta_bar,
        eps_star=eps_star(cfg.B, c), c_star=c_star(c, eps, cfg.B),
        M=overshoot_M(beta_bar, eps, c), M_with_B=overshoot_M(cfg.B, eps, c),
    )
    rec = simulate_transport(beta, u0, GainKernel(k_hat), cfg.t_final)
    exact = simulate_transport(beta, u0, GainKernel(k), cfg.t_final)

    delta = delta_from_tilde(beta, k_tilde)
    l_hat = solve_inverse_kernel(beta, delta, cfg.kernel)
    w_hat = _forward_series(k_hat, rec.states)
    V = _lyapunov_series(w_hat, n, c)
    norms = rec.l2_norms()
    t = rec.times
    u0n = norms[0]
    s_env, s_stat = cfg.envelope_slack, cfg.static_slack

    # without eps < eps* the estimate makes no claim, so both checks fail outright
    precondition = eps < bounds.eps_star
    envelope = lyap = np.zeros(1, dtype=bool)
    if precondition:
        envelope = norms <= (1 + s_env) * bounds.M * np.exp(-bounds.c_star * t / 2) * u0n
        lyap = V <= (1 + s_env) * V[0] * np.exp(-bounds.c_star * t) + 1e-30
    lower = norms ** 2 / (1 + sup_norm(l_hat)) ** 2
    upper = math.exp(c) * (1 + sup_norm(k_hat)) ** 2 * norms ** 2
    sandwich = (lower <= (1 + s_stat) * V + 1e-30) & (V <= (1 + s_stat) * upper + 1e-30)
    d_bar = (1 + beta_bar) * eps
    l_bound = (beta_bar + d_bar) * np.exp(d_bar * beta.x)
    err = l2_norm_array(rec.states - exact.states, n)

    verdicts = {
        "eps_below_eps_star": bool(precondition),
        "envelope": bool(envelope.all()),
        "lyapunov_decay": bool(lyap.all()),
        "sandwich": bool(sandwich.all()),
        "delta_bound": sup_norm(delta) <= (1 + s_stat) * d_bar + 1e-12,
        "inverse_kernel_bound": bool(np.all(np.abs(l_hat.values) <= (1 + s_stat) * l_bound + 1e-12)),
        "norm_decays": bool(norms[-1] < u0n),
    }
    return StabilityReport(
        kind="gain", times=t, norms=norms, V=V,
        decay_rate=_decay_rate_or_nan(V, rec.dt), tail_sup=_tail(t, norms, cfg.tail_start),
        bounds=bounds, verdicts=verdicts,
        series={"trajectory_error": err, "exact_norms": exact.l2_norms(), "controls": rec.controls},
        info={"delta_sup": sup_norm(delta), "l_hat_sup": sup_norm(l_hat), "k_hat_sup": sup_norm(k_hat),
              "trajectory_error_sup": float(err.max())},
        trajectory=rec,
    )


def _forward_series(k: GridFunction1D, states: np.ndarray) -> np.ndarray:
    # w = u - k * u for every row of states
    return states - states @ convolution_matrix(k.values, k.h).T


def run_feedback_experiment(
    beta: GridFunction1D, feedback, cfg: SimConfig = SimConfig(), u0: GridFunction1D | None = None
) -> StabilityReport:
    """Closed loop under a learned (beta, u) -> U map, judged by the practical-stability estimate.

    ``feedback`` is a FeedbackNetParams or any Controller. The sup-norm
    control error measured along the trajectory stands in for epsilon.
    """
    n = beta.n_cells
    u0 = default_initial_condition(n) if u0 is None else u0
    check_same_grid(beta, u0)
    ctrl = feedback if isinstance(feedback, Controller) else NeuralFeedback(feedback, beta)
    k = solve_kernel(beta, cfg.kernel)
    rec = simulate_transport(beta, u0, ctrl, cfg.t_final)
    exact = simulate_transport(beta, u0, GainKernel(k), cfg.t_final)

    w = trapezoid_weights(n)
    exact_controls = rec.states @ (w * k.values[::-1])
    u_err = exact_controls - rec.controls
    eps = float(np.max(np.abs(u_err)))
    beta_bar = sup_norm(beta)
    B_beta = max(beta_bar, 1e-12)
    c = cfg.c
    eps_fb, B_u0, radius = feedback_bounds(B_beta, cfg.B_u, c, eps)
    bounds = StabilityBounds(
        B=cfg.B, c=c, epsilon=eps, beta_bar=beta_bar,
        eps_star=eps_star(cfg.B, c), c_star=c_star(c, eps, cfg.B),
        M=overshoot_M(beta_bar, 0.0, c), M_with_B=overshoot_M(cfg.B, 0.0, c),
        B_beta=B_beta, B_u=cfg.B_u, B_u0=B_u0, eps_star_fb=eps_fb, residual_radius=radius,
        C_U=feedback_lipschitz(B_beta, cfg.B_u),
    )
    norms = rec.l2_norms()
    t = rec.times
    s = cfg.envelope_slack
    transient = (1 + B_beta) * (1 + B_beta * math.exp(B_beta)) * math.exp(c / 2) * np.exp(-c * t / 2) * norms[0]
    envelope = norms <= (1 + s) * (transient + radius)
    tail = _tail(t, norms, cfg.tail_start)
    exact_tail = _tail(t, exact.l2_norms(), cfg.tail_start)
    err = l2_norm_array(rec.states - exact.states, n)
    verdicts = {
        "eps_below_eps_star": eps < eps_fb,
        "envelope": bool(envelope.all()),
        "tail_bound": tail <= (1 + s) * radius,
    }
    return StabilityReport(
        kind="feedback", times=t, norms=norms, V=_lyapunov_series(rec.states, n, c),
        decay_rate=_decay_rate_or_nan(norms ** 2, rec.dt), tail_sup=tail,
        bounds=bounds, verdicts=verdicts,
        series={"control_error": u_err, "exact_norms": exact.l2_norms(), "trajectory_error": err,
                "controls": rec.controls},
        info={"exact_tail_sup": exact_tail, "u0_norm": float(norms[0])},
        flags={"u0_within_B_u0": bool(norms[0] <= B_u0)},
        trajectory=rec,
    )


def _resolve_kernel_2d(model_or_k, f: TriangularGridFunction) -> TriangularGridFunction:
    if isinstance(model_or_k, TriangularGridFunction):
        return model_or_k
    from .neural_operator import DeepONetParams, kernel2d_from_deeponet

    if isinstance(model_or_k, DeepONetParams):
        return kernel2d_from_deeponet(model_or_k, f)
    raise TypeError(f"expected a TriangularGridFunction kernel or DeepONetParams, got {type(model_or_k).__name__}")


def run_pide_experiment(
    g: GridFunction1D, f: TriangularGridFunction, model_or_k, cfg: SimConfig = SimConfig(),
    u0: GridFunction1D | None = None,
) -> StabilityReport:
    """PIDE closed loop with an approximate 2D kernel; checks exponential decay."""
    n = check_same_grid(g, f)
    u0 = default_initial_condition(n) if u0 is None else u0
    check_same_grid(g, u0)
    k = solve_kernel_2d(g, f, cfg.kernel)
    k_hat = _resolve_kernel_2d(model_or_k, f)
    check_same_grid(f, k_hat)
    k_tilde = k - k_hat
    kx, ky = kernel_partials(k_tilde)
    eps = max(sup_norm(k_tilde), sup_norm(kx), sup_norm(ky))
    d0, d1 = delta2d(g, f, k_tilde, kx, ky)
    g_bar, f_bar = sup_norm(g), sup_norm(f)
    l_hat = solve_inverse_kernel_2d(k_hat, cfg.kernel)
    k_sup = sup_norm(k_hat)

    rec = simulate_pide(g, f, u0, GainKernel2D(k_hat), cfg.t_final)
    exact = simulate_pide(g, f, u0, GainKernel2D(k), cfg.t_final)
    norms = rec.l2_norms()
    t = rec.times
    w_hat = rec.states - rec.states @ volterra_matrix(k_hat).T
    V = _lyapunov_series(w_hat, n, cfg.c)
    rate = _decay_rate_or_nan(norms ** 2, rec.dt, t_start=min(1.0, cfg.t_final / 2))
    err = l2_norm_array(rec.states - exact.states, n)
    s = cfg.static_slack
    verdicts = {
        "decay_rate_positive": bool(rate > 0),
        "delta0_bound": sup_norm(d0) <= (1 + s) * (1 + g_bar) * eps + 1e-12,
        "delta1_bound": sup_norm(d1) <= (1 + s) * (2 + f_bar) * eps + 1e-12,
        "inverse_kernel_bound": sup_norm(l_hat) <= (1 + s) * k_sup * math.exp(k_sup) + 1e-12,
    }
    peak = int(np.argmax(err))
    return StabilityReport(
        kind="pide", times=t, norms=norms, V=V, decay_rate=rate,
        tail_sup=_tail(t, norms, cfg.tail_start), bounds=None, verdicts=verdicts,
        series={"trajectory_error": err, "exact_norms": exact.l2_norms(), "controls": rec.controls},
        info={"epsilon": eps, "delta0_sup": sup_norm(d0), "delta1_sup": sup_norm(d1),
              "l_hat_sup": sup_norm(l_hat), "k_hat_sup": k_sup,
              "error_peak": float(err[peak]), "error_peak_time": float(t[peak]),
              "final_ratio": float(norms[-1] / norms[0])},
        trajectory=rec,
    )
