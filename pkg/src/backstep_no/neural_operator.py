"""DeepONet operator networks in plain numpy, with hand-written backprop.

A DeepONet evaluates G(u)(y) = sum_k branch_k(u(x_1), ..., u(x_m)) * trunk_k(y).
When every sample shares the same query points, the whole batch is one
matrix product ``branch(U) @ trunk(Y).T``, which is how training runs.

``FeedbackNetParams`` is the two-stage network for (beta, u) -> U:
stage 1 is a DeepONet beta -> k on the u-sensor grid; stage 2 multiplies the
reversed kernel with a learned linear map of u; stage 3 is a second
operator layer that reduces to the scalar control. Stage 3 has no biases
and uses an odd activation, so U vanishes whenever the stage-2 product does.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import TrainingDivergedError
from .grid import GridFunction1D, TriangularGridFunction, trapezoid_weights

log = logging.getLogger(__name__)

MODEL_FORMAT = "backstep-no-model/1"


# --- dense networks ------------------------------------------------------

def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - a * a
    return (a > 0).astype(a.dtype)


@dataclass
class MLPParams:
    """Fully connected net; hidden layers use ``activation``, the output is linear.

    Weights are stored (d_in, d_out) so that a batch x of shape (b, d_in)
    maps as x @ W + b.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias entry (possibly None) per layer")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError(f"layer shapes do not chain: {w0.shape} -> {w1.shape}")
        for w, b in zip(self.weights, self.biases):
            if b is not None and b.shape != (w.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def has_bias(self) -> bool:
        return self.biases[0] is not None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out


def init_mlp(layer_sizes, rng: np.random.Generator, activation: str = "tanh", bias: bool = True) -> MLPParams:
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = math.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-lim, lim, size=(d_in, d_out)))
        biases.append(np.zeros(d_out) if bias else None)
    return MLPParams(weights, biases, activation)


def mlp_forward(p: MLPParams, x: np.ndarray):
    acts = [x]
    a = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w
        if b is not None:
            z = z + b
        a = z if i == last else _act(p.activation, z)
        acts.append(a)
    return a, acts


def mlp_backward(p: MLPParams, acts: list[np.ndarray], grad_out: np.ndarray):
    """Gradients in ``p.arrays()`` order, plus the gradient w.r.t. the input."""
    grads: list[np.ndarray] = []
    g = grad_out
    for i in range(len(p.weights) - 1, -1, -1):
        if i != len(p.weights) - 1:
            g = g * _act_grad(p.activation, acts[i + 1])
        gw = acts[i].T @ g
        layer = [gw] if p.biases[i] is None else [gw, g.sum(axis=0)]
        grads[:0] = layer
        g = g @ p.weights[i].T
    return grads, g


# --- DeepONet ------------------------------------------------------------

@dataclass
class DeepONetParams:
    """Branch/trunk pair plus the fixed pre/post scaling used in training.

    ``sensors`` are the input-function sample locations, shape (m,) on [0, 1]
    or (m, 2) on the triangle. Branch inputs are standardized with the fixed
    ``input_shift``/``input_scale``; trunk coordinates are mapped to [-1, 1];
    the inner product is multiplied by ``output_scale``.
    """

    branch: MLPParams
    trunk: MLPParams
    sensors: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_scale: float = 1.0

    def __post_init__(self):
        if self.branch.layer_sizes[-1] != self.trunk.layer_sizes[-1]:
            raise ValueError("branch and trunk must end in the same basis count p")
        if self.branch.layer_sizes[0] != self.m:
            raise ValueError(f"branch input {self.branch.layer_sizes[0]} != sensor count {self.m}")
        if self.trunk.layer_sizes[0] != self.query_dim:
            raise ValueError("trunk input dim does not match the sensor coordinate dim")

    @property
    def m(self) -> int:
        return self.sensors.shape[0]

    @property
    def p(self) -> int:
        return self.branch.layer_sizes[-1]

    @property
    def query_dim(self) -> int:
        return 1 if self.sensors.ndim == 1 else self.sensors.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return self.branch.arrays() + self.trunk.arrays()


def _trunk_input(y: np.ndarray, dim: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return 2.0 * y.reshape(-1, dim) - 1.0


def _deeponet_eval(p: DeepONetParams, u: np.ndarray, y: np.ndarray):
    bx = (u - p.input_shift) / p.input_scale
    b, b_acts = mlp_forward(p.branch, bx)
    t, t_acts = mlp_forward(p.trunk, _trunk_input(y, p.query_dim))
    return p.output_scale * (b @ t.T), (b, b_acts, t, t_acts)


def _deeponet_backward(p: DeepONetParams, cache, grad_out: np.ndarray):
    b, b_acts, t, t_acts = cache
    g = p.output_scale * grad_out
    gb, gbx = mlp_backward(p.branch, b_acts, g @ t)
    gt, _ = mlp_backward(p.trunk, t_acts, g.T @ b)
    return gb + gt, gbx / p.input_scale


def deeponet_forward(p: DeepONetParams, u_sensors: np.ndarray, y_points: np.ndarray) -> np.ndarray:
    """G(u)(y) at every query point; a 2D ``u_sensors`` evaluates a batch."""
    u = np.asarray(u_sensors, dtype=np.float64)
    if u.shape[-1] != p.m:
        raise ValueError(f"expected {p.m} sensor values, got {u.shape[-1]}")
    y = np.asarray(y_points, dtype=np.float64)
    if p.query_dim > 1 and (y.ndim != 2 or y.shape[1] != p.query_dim):
        raise ValueError(f"query points must have shape (Q, {p.query_dim})")
    out, _ = _deeponet_eval(p, np.atleast_2d(u), y)
    return out[0] if u.ndim == 1 else out


def deeponet2d_forward(p: DeepONetParams, f_sensors: np.ndarray, xy_points: np.ndarray) -> np.ndarray:
    """Kernel values at (x, y) points for a flattened-triangle input."""
    if p.query_dim != 2:
        raise ValueError("not a 2D DeepONet")
    return deeponet_forward(p, f_sensors, xy_points)


def init_deeponet(
    sensors: np.ndarray,
    rng: np.random.Generator,
    branch_hidden=(256, 256),
    trunk_hidden=(128, 128),
    p: int = 128,
    activation: str = "tanh",
    input_shift=None,
    input_scale=None,
    output_scale: float = 1.0,
) -> DeepONetParams:
    sensors = np.asarray(sensors, dtype=np.float64)
    m = sensors.shape[0]
    dim = 1 if sensors.ndim == 1 else sensors.shape[1]
    branch = init_mlp([m, *branch_hidden, p], rng, activation)
    trunk = init_mlp([dim, *trunk_hidden, p], rng, activation)
    shift = np.zeros(m) if input_shift is None else np.broadcast_to(input_shift, (m,)).astype(float)
    scale = np.ones(m) if input_scale is None else np.broadcast_to(input_scale, (m,)).astype(float)
    # 1/sqrt(p) keeps the initial inner product O(1)
    return DeepONetParams(branch, trunk, sensors, shift, scale, output_scale / math.sqrt(p))


def sensor_stride(n_sensor_cells: int, n_cells: int) -> int:
    if n_cells % n_sensor_cells:
        raise ValueError(f"grid with {n_cells} cells cannot be sampled at {n_sensor_cells} sensor cells")
    return n_cells // n_sensor_cells


def kernel_from_deeponet(p: DeepONetParams, beta: GridFunction1D, n_cells: int | None = None) -> GridFunction1D:
    """Evaluate the learned kernel on a uniform grid (default: beta's grid)."""
    n = beta.n_cells if n_cells is None else n_cells
    stride = sensor_stride(p.m - 1, beta.n_cells)
    x = np.linspace(0.0, 1.0, n + 1)
    return GridFunction1D(n, deeponet_forward(p, beta.values[::stride], x))


def kernel2d_from_deeponet(p: DeepONetParams, f: TriangularGridFunction, n_cells: int | None = None) -> TriangularGridFunction:
    from .grid import triangle_points

    n = f.n_cells if n_cells is None else n_cells
    n_sensor_cells = int(round((math.sqrt(8 * p.m + 1) - 3) / 2))  # m = (s+1)(s+2)/2
    sensors = f.restrict(sensor_stride(n_sensor_cells, f.n_cells)).values
    return TriangularGridFunction(n, deeponet2d_forward(p, sensors, triangle_points(n)))


# --- two-stage feedback network ------------------------------------------

@dataclass
class FeedbackNetParams:
    kernel_net: DeepONetParams
    mix: np.ndarray
    reduce_branch: MLPParams
    reduce_trunk: MLPParams
    u_scale: float = 1.0
    z_scale: float = 1.0
    output_scale: float = 1.0
    # U is linear in u: evaluate on u / rms(u) and multiply back, which makes
    # the learned map exactly positively homogeneous in u
    homogeneous: bool = False

    def __post_init__(self):
        q = self.mix.shape[0]
        if self.mix.shape != (q, q):
            raise ValueError("mix must be square")
        if self.reduce_branch.has_bias:
            raise ValueError("the reducing branch must be bias-free")
        if self.reduce_branch.layer_sizes[0] != q:
            raise ValueError("reducing branch input must match the u-sensor count")

    @property
    def n_u_sensors(self) -> int:
        return self.mix.shape[0]

    @property
    def u_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_u_sensors)

    def sample_beta(self, beta: GridFunction1D) -> np.ndarray:
        return beta.values[::sensor_stride(self.kernel_net.m - 1, beta.n_cells)]

    def arrays(self) -> list[np.ndarray]:
        return self.kernel_net.arrays() + [self.mix] + self.reduce_branch.arrays() + self.reduce_trunk.arrays()


def init_feedback_net(
    beta_sensors: np.ndarray,
    n_u_sensors: int,
    rng: np.random.Generator,
    kernel_net: DeepONetParams | None = None,
    reduce_hidden=(64,),
    p_reduce: int = 32,
    homogeneous: bool = False,
    **deeponet_kwargs,
) -> FeedbackNetParams:
    if kernel_net is None:
        kernel_net = init_deeponet(beta_sensors, rng, **deeponet_kwargs)
    mix = np.eye(n_u_sensors)
    reduce_branch = init_mlp([n_u_sensors, *reduce_hidden, p_reduce], rng, "tanh", bias=False)
    reduce_trunk = init_mlp([1, *reduce_hidden, p_reduce], rng, "tanh")
    return FeedbackNetParams(kernel_net, mix, reduce_branch, reduce_trunk, homogeneous=homogeneous)


def _u_rms(p: FeedbackNetParams, u: np.ndarray) -> np.ndarray:
    if not p.homogeneous:
        return np.ones(u.shape[0])
    return np.sqrt(np.mean(u ** 2, axis=1))


def _feedback_eval(p: FeedbackNetParams, beta: np.ndarray, u: np.ndarray):
    s = _u_rms(p, u)
    u = u / np.where(s > 0, s, 1.0)[:, None]
    y = p.u_grid
    kvals, k_cache = _deeponet_eval(p.kernel_net, beta, y)
    krev = kvals[:, ::-1]
    mixed = (u / p.u_scale) @ p.mix
    z = p.z_scale * krev * mixed
    rb, rb_acts = mlp_forward(p.reduce_branch, z)
    rt, rt_acts = mlp_forward(p.reduce_trunk, np.ones((1, 1)))
    out = s * p.output_scale * (rb @ rt.T)[:, 0]
    return out, (k_cache, krev, mixed, u, rb, rb_acts, rt, rt_acts, s)


def _feedback_backward(p: FeedbackNetParams, cache, grad_out: np.ndarray):
    k_cache, krev, mixed, u, rb, rb_acts, rt, rt_acts, s = cache
    g = p.output_scale * (s * grad_out)[:, None]
    g_rb, g_z = mlp_backward(p.reduce_branch, rb_acts, g @ rt)
    g_rt, _ = mlp_backward(p.reduce_trunk, rt_acts, g.T @ rb)
    g_z = g_z * p.z_scale
    g_mix = (u / p.u_scale).T @ (g_z * krev)
    g_kvals = (g_z * mixed)[:, ::-1]
    g_kernel, _ = _deeponet_backward(p.kernel_net, k_cache, g_kvals)
    return g_kernel + [g_mix] + g_rb + g_rt


def feedback_forward(p: FeedbackNetParams, beta_sensors: np.ndarray, u_sensors: np.ndarray):
    """Learned control U for one (beta, u) pair, or a batch if given 2D arrays."""
    beta = np.asarray(beta_sensors, dtype=np.float64)
    u = np.asarray(u_sensors, dtype=np.float64)
    if beta.shape[-1] != p.kernel_net.m or u.shape[-1] != p.n_u_sensors:
        raise ValueError(
            f"expected {p.kernel_net.m} beta sensors and {p.n_u_sensors} u sensors, "
            f"got {beta.shape[-1]} and {u.shape[-1]}"
        )
    single = beta.ndim == 1 and u.ndim == 1
    out, _ = _feedback_eval(p, np.atleast_2d(beta), np.atleast_2d(u))
    return float(out[0]) if single else out


def feedback_stage1_kernel(p: FeedbackNetParams, beta_sensors: np.ndarray) -> GridFunction1D:
    """Stage-1 kernel values on the u-sensor grid."""
    n = p.n_u_sensors - 1
    return GridFunction1D(n, deeponet_forward(p.kernel_net, beta_sensors, p.u_grid))


# --- losses --------------------------------------------------------------

def relative_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of ||pred - target|| / ||target||."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    return float(np.mean(np.linalg.norm(pred - target, axis=1) / np.linalg.norm(target, axis=1)))


def _relative_l2_grad(pred, target):
    err = pred - target
    en = np.linalg.norm(err, axis=1, keepdims=True)
    tn = np.linalg.norm(target, axis=1, keepdims=True)
    loss = float(np.mean(en / tn))
    safe = np.where(en > 0, en, 1.0)
    return loss, err / (safe * tn * pred.shape[0])


def _relative_sq_grad(pred, target):
    # smooth at the optimum, unlike the plain ratio, so Adam steps shrink as the fit improves
    err = pred - target
    tn2 = np.sum(target ** 2, axis=1, keepdims=True)
    loss = float(np.mean(np.sum(err ** 2, axis=1, keepdims=True) / tn2))
    return loss, 2.0 * err / (tn2 * pred.shape[0])


def _pooled_relative_l2_grad(pred, target):
    # scalar outputs: one relative error over the whole batch
    err = pred - target
    en = np.linalg.norm(err)
    tn = np.linalg.norm(target)
    return float(en / tn), err / ((en if en > 0 else 1.0) * tn)


def _mse_grad(pred, target):
    err = pred - target
    return float(0.5 * np.sum(err ** 2)), err


LOSSES = {"relative_l2": _relative_l2_grad, "relative_sq": _relative_sq_grad, "pooled_relative_l2": _pooled_relative_l2_grad, "mse": _mse_grad}


@dataclass
class Batch:
    """Inputs, targets and (for DeepONets) the shared query points."""

    inputs: np.ndarray
    targets: np.ndarray
    queries: np.ndarray | None = None
    extra: np.ndarray | None = None  # u samples for the feedback net


def loss_and_grads(params, batch: Batch, loss: str | None = None):
    """Loss value and gradients in ``params.arrays()`` order."""
    if isinstance(params, DeepONetParams):
        fn = LOSSES[loss or "relative_l2"]
        pred, cache = _deeponet_eval(params, batch.inputs, batch.queries)
        value, g = fn(pred, batch.targets)
        grads, _ = _deeponet_backward(params, cache, g)
    elif isinstance(params, FeedbackNetParams):
        fn = LOSSES[loss or "pooled_relative_l2"]
        pred, cache = _feedback_eval(params, batch.inputs, batch.extra)
        value, g = fn(pred, batch.targets)
        grads = _feedback_backward(params, cache, g)
    elif isinstance(params, MLPParams):
        fn = LOSSES[loss or "mse"]
        pred, acts = mlp_forward(params, batch.inputs)
        value, g = fn(pred, batch.targets)
        grads, _ = mlp_backward(params, acts, g)
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    return value, grads


def predict(params, batch: Batch) -> np.ndarray:
    if isinstance(params, DeepONetParams):
        return _deeponet_eval(params, batch.inputs, batch.queries)[0]
    if isinstance(params, FeedbackNetParams):
        return _feedback_eval(params, batch.inputs, batch.extra)[0]
    return mlp_forward(params, batch.inputs)[0]


def gradient_check(params, sample: Batch, epsilon_fd: float = 1e-4, loss: str | None = None,
                   n_params: int = 128, seed: int = 0) -> float:
    """Worst relative gap between backprop and central differences.

    Checks ``n_params`` randomly chosen scalar parameters (all of them if
    there are fewer). Gaps are measured relative to |g_bp| + |g_fd|, floored
    at 1e-7 of the largest backprop gradient so that parameters with
    vanishing gradient are not judged on round-off alone.
    """
    if not epsilon_fd > 0:
        raise ValueError("epsilon_fd must be positive")
    arrays = params.arrays()
    _, grads = loss_and_grads(params, sample, loss)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_params else rng.choice(total, n_params, replace=False)
    offsets = np.cumsum([0] + sizes)
    scale = max(max(float(np.max(np.abs(g))) for g in grads), 1e-300)
    worst = 0.0
    for flat in picks:
        a = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[a], arrays[a].shape)
        orig = arrays[a][idx]
        arrays[a][idx] = orig + epsilon_fd
        up, _ = loss_and_grads(params, sample, loss)
        arrays[a][idx] = orig - epsilon_fd
        down, _ = loss_and_grads(params, sample, loss)
        arrays[a][idx] = orig
        fd = (up - down) / (2 * epsilon_fd)
        bp = float(grads[a][idx])
        denom = max(abs(bp) + abs(fd), 1e-7 * scale)
        worst = max(worst, abs(bp - fd) / denom)
    return worst


# --- training ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "relative_l2"
    lr_decay: float = 1.0  # multiplicative factor applied every ``decay_every`` epochs
    decay_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise ValueError("lr_decay must lie in (0, 1] and decay_every be positive")


class _Optimizer:
    def __init__(self, arrays: list[np.ndarray], cfg: TrainConfig):
        self.arrays = arrays
        self.kind = cfg.optimizer
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float):
        self.t += 1
        if self.kind == "sgd":
            for a, g in zip(self.arrays, grads):
                a -= lr * g
        elif self.kind == "momentum":
            for a, g, m in zip(self.arrays, grads, self.m):
                m *= 0.9
                m += g
                a -= lr * m
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            c1 = 1 - b1 ** self.t
            c2 = 1 - b2 ** self.t
            for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainHistory:
    train: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)


def _subset(batch: Batch, idx) -> Batch:
    return Batch(
        batch.inputs[idx], batch.targets[idx], batch.queries,
        None if batch.extra is None else batch.extra[idx],
    )


def evaluate(params, data: Batch, loss: str) -> float:
    pred = predict(params, data)
    if loss == "pooled_relative_l2":
        return float(np.linalg.norm(pred - data.targets) / np.linalg.norm(data.targets))
    if loss == "mse":
        return float(0.5 * np.sum((pred - data.targets) ** 2))
    return relative_l2(pred, data.targets)


def fit(params, train: Batch, cfg: TrainConfig, validation: Batch | None = None,
        callback: Callable[[int, float, float | None], None] | None = None):
    """Minibatch training in place; returns ``(params, TrainHistory)``."""
    n = train.inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(params.arrays(), cfg)
    hist = TrainHistory()
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch and epoch % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = loss_and_grads(params, _subset(train, idx), cfg.loss)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (lr={lr:.2e}, batch starting {start})"
                )
            opt.step(grads, lr)
            total += value * len(idx)
        hist.train.append(total / n)
        val = evaluate(params, validation, cfg.loss) if validation is not None else None
        if val is not None:
            hist.validation.append(val)
        if callback is not None:
            callback(epoch, hist.train[-1], val)
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d train %.3e val %s", epoch, hist.train[-1], "-" if val is None else f"{val:.3e}")
    return params, hist


def deeponet_for_data(dataset: Batch, seed: int = 0, sensors: np.ndarray | None = None, **arch) -> DeepONetParams:
    """Fresh DeepONet whose fixed scalings come from ``dataset``.

    Inputs are standardized with the per-sensor mean and the global standard
    deviation; the output scale is the RMS target value.
    """
    if dataset.inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    if sensors is None:
        sensors = np.linspace(0.0, 1.0, dataset.inputs.shape[1])
    std = float(np.std(dataset.inputs)) or 1.0
    return init_deeponet(
        sensors, np.random.default_rng(seed),
        input_shift=np.mean(dataset.inputs, axis=0), input_scale=std,
        output_scale=float(np.sqrt(np.mean(dataset.targets ** 2))) or 1.0,
        **arch,
    )


def train_deeponet(dataset: Batch, cfg: TrainConfig, validation: Batch | None = None,
                   params: DeepONetParams | None = None, sensors: np.ndarray | None = None, **arch):
    """Train a DeepONet on (input samples, target on ``dataset.queries``) pairs.

    A fresh network is built from ``cfg.seed`` unless ``params`` is given
    (continuation).
    """
    if dataset.inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    if params is None:
        params = deeponet_for_data(dataset, cfg.seed, sensors, **arch)
    return fit(params, dataset, cfg, validation)


def basis_warm_start(params: DeepONetParams, dataset: Batch, trunk_epochs: int, branch_epochs: int,
                     learning_rate: float = 1e-3, batch_size: int = 64, seed: int = 0) -> DeepONetParams:
    """Pre-fit trunk and branch separately before end-to-end training (in place).

    The trunk is regressed onto the leading p right singular vectors of the
    training targets (scaled to unit RMS). The branch is then regressed onto
    the least-squares coefficients of each target in the fitted trunk's span.
    Both subproblems train far faster than the coupled product, which matters
    when the targets are smooth 2D fields. Each stage runs Adam from
    ``learning_rate`` with ten 0.7 decays. End-to-end training afterwards
    needs a much smaller step or the first Adam updates undo the fit.
    """
    targets, queries = dataset.targets, dataset.queries
    n_q = targets.shape[1]
    if params.p > min(targets.shape):
        raise ValueError(f"p = {params.p} exceeds the rank available from {targets.shape} targets")
    _, _, vt = np.linalg.svd(targets, full_matrices=False)
    modes = vt[:params.p].T * math.sqrt(n_q)
    y = _trunk_input(queries, params.query_dim)

    def stage(epochs, batch, loss):
        return TrainConfig(learning_rate=learning_rate, epochs=epochs, batch_size=batch, loss=loss,
                           lr_decay=0.7, decay_every=max(1, epochs // 10), seed=seed)

    if trunk_epochs:
        # one full batch: the query grid is small and the regression is deterministic
        fit(params.trunk, Batch(y, modes), stage(trunk_epochs, n_q, "mse"))
    if branch_epochs:
        t, _ = mlp_forward(params.trunk, y)
        coef = np.linalg.lstsq(t, targets.T, rcond=None)[0].T / params.output_scale
        bx = (dataset.inputs - params.input_shift) / params.input_scale
        fit(params.branch, Batch(bx, coef), stage(branch_epochs, batch_size, "relative_l2"))
    return params


def feedback_net_for_data(dataset: Batch, n_u_sensors: int, seed: int = 0,
                          kernel_net: DeepONetParams | None = None, **arch) -> FeedbackNetParams:
    """Fresh two-stage network with scalings from ``dataset``.

    u is divided by its standard deviation, the stage-2 product is rescaled
    to unit spread at initialization and the output is scaled by the RMS
    control. With ``homogeneous=True`` those statistics are taken after
    dividing each sample by rms(u).
    """
    if dataset.inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    betas = dataset.inputs
    std = float(np.std(betas)) or 1.0
    arch = dict(arch)
    net_kwargs = {k: arch.pop(k) for k in ("branch_hidden", "trunk_hidden", "p") if k in arch}
    if kernel_net is None:
        kernel_net = init_deeponet(
            np.linspace(0.0, 1.0, betas.shape[1]), rng,
            input_shift=np.mean(betas, axis=0), input_scale=std, **net_kwargs,
        )
    params = init_feedback_net(None, n_u_sensors, rng, kernel_net=kernel_net, **arch)
    rms = _u_rms(params, dataset.extra)
    safe = np.where(rms > 0, rms, 1.0)
    params.u_scale = float(np.std(dataset.extra / safe[:, None])) or 1.0
    params.output_scale = float(np.sqrt(np.mean((dataset.targets / safe) ** 2))) or 1.0
    _, cache = _feedback_eval(params, betas, dataset.extra)
    krev, mixed = cache[1], cache[2]
    params.z_scale = 1.0 / (float(np.std(krev * mixed)) or 1.0)
    return params


def train_feedback_net(dataset: Batch, cfg: TrainConfig, n_u_sensors: int,
                       validation: Batch | None = None, params: FeedbackNetParams | None = None,
                       kernel_net: DeepONetParams | None = None, **arch):
    """Train the two-stage (beta, u) -> U network.

    ``dataset.inputs`` holds beta sensor values, ``dataset.extra`` the u
    sensor values and ``dataset.targets`` the scalar controls. The default
    per-sample loss is replaced by the pooled one, since single controls can
    be arbitrarily close to zero.
    """
    if dataset.inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    if params is None:
        params = feedback_net_for_data(dataset, n_u_sensors, cfg.seed, kernel_net, **arch)
    cfg = cfg if cfg.loss != "relative_l2" else TrainConfig(**{**cfg.__dict__, "loss": "pooled_relative_l2"})
    return fit(params, dataset, cfg, validation)


def train_feedback_stagewise(params: FeedbackNetParams, dataset: Batch, kernels: np.ndarray, cfg: TrainConfig,
                             linear_range: float = 0.01):
    """Fit stage 1 to exact kernels, then set stage 3 to the trapezoid integral (in place).

    ``kernels`` holds k on the u-sensor grid for each sample. Stage 1 is
    trained with the per-sample relative loss under ``cfg``, so every plant
    is fitted to its own scale; a pooled loss on U lets the plants with large
    kernels dominate. Stage 3 is then set so that one hidden unit carries
    sum_j w_j z_j, kept in the near-linear part of tanh by ``linear_range``
    (its RMS pre-activation), and mix is reset to the identity. The network
    then computes the quadrature of the learned kernel against u.

    End-to-end training afterwards is not advised: the stage-3 input weights
    are tiny and the first Adam steps swamp them.
    Returns ``(params, history)`` with the stage-1 history.
    """
    if kernels.shape != (dataset.inputs.shape[0], params.n_u_sensors):
        raise ValueError(f"kernels must have shape {(dataset.inputs.shape[0], params.n_u_sensors)}")
    _, hist = fit(params.kernel_net, Batch(dataset.inputs, kernels, params.u_grid),
                  TrainConfig(**{**cfg.__dict__, "loss": "relative_l2"}))
    params.mix[...] = np.eye(params.n_u_sensors)
    _, cache = _feedback_eval(params, dataset.inputs, dataset.extra)
    krev, mixed = cache[1], cache[2]
    z = params.z_scale * krev * mixed
    w = trapezoid_weights(params.n_u_sensors - 1)
    q = z @ w
    alpha = linear_range / (float(np.sqrt(np.mean(q ** 2))) or 1.0)
    r, _ = mlp_forward(params.reduce_trunk, np.ones((1, 1)))
    r = r[0]
    # out = s * output_scale * rb(z) . r must equal s * u_scale / z_scale * w . z
    gain = params.u_scale / (params.z_scale * params.output_scale)
    if len(params.reduce_branch.weights) != 2:
        raise ValueError("the analytic stage-3 start needs exactly one hidden layer")
    w1, w2 = params.reduce_branch.weights
    # the other hidden units keep their random inputs but start silent, so they can still learn
    w1[:, 0] = alpha * w
    w2[...] = 0.0
    w2[0, :] = gain / alpha * r / float(r @ r)
    return params, hist


def smoothed_monotone(history: list[float], window: int = 10, tolerance: float = 0.10) -> bool:
    """True unless the window-averaged loss rises more than ``tolerance`` above its running minimum."""
    h = np.asarray(history, dtype=float)
    if h.size < window:
        return True
    smooth = np.convolve(h, np.ones(window) / window, mode="valid")
    running_min = np.minimum.accumulate(smooth)
    return bool(np.all(smooth <= (1 + tolerance) * running_min))


# --- serialization -------------------------------------------------------

def _mlp_spec(p: MLPParams) -> dict:
    return {"layer_sizes": p.layer_sizes, "activation": p.activation, "bias": p.has_bias}


def _deeponet_spec(p: DeepONetParams) -> dict:
    return {
        "branch": _mlp_spec(p.branch),
        "trunk": _mlp_spec(p.trunk),
        "sensors": p.sensors.tolist(),
        "input_shift": p.input_shift.tolist(),
        "input_scale": p.input_scale.tolist(),
        "output_scale": p.output_scale,
    }


def _empty_mlp(spec: dict) -> MLPParams:
    sizes = spec["layer_sizes"]
    weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) if spec["bias"] else None for b in sizes[1:]]
    return MLPParams(weights, biases, spec["activation"])


def _empty_deeponet(spec: dict) -> DeepONetParams:
    return DeepONetParams(
        _empty_mlp(spec["branch"]), _empty_mlp(spec["trunk"]),
        np.array(spec["sensors"], dtype=float),
        np.array(spec["input_shift"], dtype=float),
        np.array(spec["input_scale"], dtype=float),
        float(spec["output_scale"]),
    )


def save_model(params, path, manifest: dict | None = None) -> Path:
    """Write ``model.json`` and the little-endian float64 blob ``params.f64`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(params, DeepONetParams):
        arch = {"type": "deeponet", **_deeponet_spec(params)}
    elif isinstance(params, FeedbackNetParams):
        arch = {
            "type": "feedback",
            "kernel_net": _deeponet_spec(params.kernel_net),
            "n_u_sensors": params.n_u_sensors,
            "reduce_branch": _mlp_spec(params.reduce_branch),
            "reduce_trunk": _mlp_spec(params.reduce_trunk),
            "u_scale": params.u_scale,
            "z_scale": params.z_scale,
            "output_scale": params.output_scale,
            "homogeneous": params.homogeneous,
        }
    else:
        raise TypeError(f"cannot serialize {type(params).__name__}")
    blob = np.concatenate([a.ravel() for a in params.arrays()]).astype("<f8")
    doc = {"format": MODEL_FORMAT, "architecture": arch, "n_params": int(blob.size), **(manifest or {})}
    (path / "params.f64").write_bytes(blob.tobytes())
    (path / "model.json").write_text(json.dumps(doc, indent=2))
    return path


def load_model(path):
    path = Path(path)
    doc = json.loads((path / "model.json").read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")
    arch = doc["architecture"]
    if arch["type"] == "deeponet":
        params = _empty_deeponet(arch)
    elif arch["type"] == "feedback":
        params = FeedbackNetParams(
            _empty_deeponet(arch["kernel_net"]),
            np.zeros((arch["n_u_sensors"], arch["n_u_sensors"])),
            _empty_mlp(arch["reduce_branch"]),
            _empty_mlp(arch["reduce_trunk"]),
            float(arch["u_scale"]), float(arch["z_scale"]), float(arch["output_scale"]),
            bool(arch.get("homogeneous", False)),
        )
    else:
        raise ValueError(f"unknown model type {arch['type']!r}")
    blob = np.frombuffer((path / "params.f64").read_bytes(), dtype="<f8")
    arrays = params.arrays()
    if blob.size != sum(a.size for a in arrays):
        raise ValueError(f"parameter blob has {blob.size} values, architecture needs {sum(a.size for a in arrays)}")
    offset = 0
    for a in arrays:
        a[...] = blob[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    return params, doc
