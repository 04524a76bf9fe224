"""Glue between stored datasets and network training.

The default recipes here are the ones the CLI and the acceptance suite use;
they are sized for a single CPU core.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .dataset import Dataset
from .errors import GradientCheckError
from .grid import GridFunction1D, TriangularGridFunction, triangle_points
from .kernel1d import DEFAULT_CONFIG, KernelSolveConfig, solve_kernel
from .neural_operator import (
    Batch,
    DeepONetParams,
    FeedbackNetParams,
    TrainConfig,
    basis_warm_start,
    deeponet_for_data,
    evaluate,
    feedback_net_for_data,
    gradient_check,
    sensor_stride,
    train_deeponet,
    train_feedback_net,
    train_feedback_stagewise,
)

GRADIENT_CHECK_LIMIT = 1e-5


DEFAULT_RECIPES = {
    "kernel1d": {
        "train": {"learning_rate": 1e-5, "batch_size": 64, "epochs": 100, "lr_decay": 0.7, "decay_every": 20},
        "arch": {"sensor_cells": 100, "branch_hidden": [128, 128], "trunk_hidden": [128, 128], "p": 32,
                 "trunk_warm_epochs": 15000, "branch_warm_epochs": 3000, "warm_learning_rate": 1e-3},
    },
    "feedback": {
        # trains the kernel stage only; stage 3 is set in closed form
        "train": {"learning_rate": 5e-4, "batch_size": 64, "epochs": 600, "lr_decay": 0.6, "decay_every": 50},
        "arch": {"sensor_cells": 100, "u_sensor_cells": 200, "branch_hidden": [128, 128],
                 "trunk_hidden": [128, 128], "p": 64, "homogeneous": True, "stagewise": True},
    },
    "kernel2d": {
        # warm start does the heavy lifting; the end-to-end pass only polishes
        "train": {"learning_rate": 1e-5, "batch_size": 64, "epochs": 100, "lr_decay": 0.7, "decay_every": 20},
        "arch": {"sensor_cells": 50, "branch_hidden": [128, 128], "trunk_hidden": [128, 128], "p": 32,
                 "trunk_warm_epochs": 15000, "branch_warm_epochs": 3000, "warm_learning_rate": 1e-3},
    },
}


def recipe(kind: str, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    """TrainConfig and architecture dict for ``kind``, with config-file overrides applied."""
    base = DEFAULT_RECIPES[kind]
    overrides = dict(overrides or {})
    train_keys = {f.name for f in fields(TrainConfig)}
    train = {**base["train"], **{k: v for k, v in overrides.items() if k in train_keys}}
    arch = {**base["arch"], **{k: v for k, v in overrides.items() if k not in train_keys}}
    return TrainConfig(**train), arch


def _tri_subsample(values: np.ndarray, n_cells: int, stride: int) -> np.ndarray:
    return np.array([TriangularGridFunction(n_cells, v).restrict(stride).values for v in values])


def to_batch(ds: Dataset, arch: dict, full_queries: bool = True) -> Batch:
    """Network inputs/targets for a dataset.

    For 2D kernels ``full_queries=False`` keeps only the query points on the
    sensor grid, which is how training runs; evaluation uses every node.
    """
    m = ds.manifest
    kind = m.kind
    if kind == "kernel1d":
        stride = sensor_stride(arch["sensor_cells"], m.n_cells)
        return Batch(ds.arrays["betas"][:, ::stride], ds.arrays["kernels"], np.linspace(0.0, 1.0, m.n_cells + 1))
    if kind == "feedback":
        stride = sensor_stride(arch["sensor_cells"], m.n_cells)
        u_stride = sensor_stride(arch["u_sensor_cells"], m.n_cells)
        return Batch(ds.arrays["betas"][:, ::stride], ds.arrays["controls"], None, ds.arrays["u"][:, ::u_stride])
    stride = sensor_stride(arch["sensor_cells"], m.n_cells)
    inputs = _tri_subsample(ds.arrays["f"], m.n_cells, stride)
    if full_queries:
        return Batch(inputs, ds.arrays["kernels2d"], triangle_points(m.n_cells))
    return Batch(inputs, _tri_subsample(ds.arrays["kernels2d"], m.n_cells, stride), triangle_points(arch["sensor_cells"]))


def feedback_kernels(ds: Dataset, cfg: KernelSolveConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Exact gain kernel of every plant in a feedback corpus, full grid."""
    n = ds.manifest.n_cells
    return np.array([solve_kernel(GridFunction1D(n, b), cfg).values for b in ds.arrays["betas"]])


def split(batch: Batch, n_validation: int) -> tuple[Batch, Batch]:
    n = batch.inputs.shape[0]
    if not 0 < n_validation < n:
        raise ValueError(f"cannot hold out {n_validation} of {n} samples")
    cut = n - n_validation
    pick = lambda a, s: None if a is None else a[s]
    head, tail = slice(0, cut), slice(cut, n)
    return (
        Batch(batch.inputs[head], batch.targets[head], batch.queries, pick(batch.extra, head)),
        Batch(batch.inputs[tail], batch.targets[tail], batch.queries, pick(batch.extra, tail)),
    )


def _net_kwargs(arch: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in arch.items()
            if k in ("branch_hidden", "trunk_hidden", "p")}


def build_network(ds: Dataset, cfg: TrainConfig, arch: dict, train: Batch | None = None):
    """Untrained network for ``ds`` with data-derived scalings, seeded by ``cfg.seed``."""
    train = to_batch(ds, arch, full_queries=False) if train is None else train
    if ds.manifest.kind == "feedback":
        extra = {k: arch[k] for k in ("homogeneous",) if k in arch}
        return feedback_net_for_data(train, arch["u_sensor_cells"] + 1, cfg.seed, **_net_kwargs(arch), **extra)
    if ds.manifest.kind == "kernel2d":
        sensors = triangle_points(arch["sensor_cells"])
    else:
        sensors = np.linspace(0.0, 1.0, arch["sensor_cells"] + 1)
    return deeponet_for_data(train, cfg.seed, sensors, **_net_kwargs(arch))


def check_gradients(params, train: Batch, cfg: TrainConfig, n_samples: int = 2) -> float:
    """Backprop vs finite differences on the first samples; raises above the limit."""
    loss = cfg.loss
    if isinstance(params, FeedbackNetParams) and loss == "relative_l2":
        loss = "pooled_relative_l2"
    sample = Batch(train.inputs[:n_samples], train.targets[:n_samples], train.queries,
                   None if train.extra is None else train.extra[:n_samples])
    gap = gradient_check(params, sample, loss=loss)
    if not gap < GRADIENT_CHECK_LIMIT:
        raise GradientCheckError(f"gradient check failed: relative gap {gap:.2e} >= {GRADIENT_CHECK_LIMIT:.0e}")
    return gap


def train_on_dataset(ds: Dataset, cfg: TrainConfig, arch: dict, validation: Dataset | None = None,
                     params=None):
    """Train the network matching ``ds.manifest.kind``; returns (params, history, gradient gap).

    Networks are gradient-checked before the first step (a resumed one
    through a freshly initialized twin); a gap of 1e-5 or more aborts with
    GradientCheckError. Fresh DeepONets get a basis warm
    start when the arch sets ``trunk_warm_epochs`` / ``branch_warm_epochs``;
    feedback nets with ``stagewise`` set are fitted through their kernel
    stage (see ``train_feedback_stagewise``).
    """
    train = to_batch(ds, arch, full_queries=False)
    val = None if validation is None else to_batch(validation, arch)
    if params is None:
        params = build_network(ds, cfg, arch, train)
        gap = check_gradients(params, train, cfg)
        if isinstance(params, DeepONetParams) and (arch.get("trunk_warm_epochs") or arch.get("branch_warm_epochs")):
            basis_warm_start(params, train, arch.get("trunk_warm_epochs", 0), arch.get("branch_warm_epochs", 0),
                             arch.get("warm_learning_rate", 1e-3), cfg.batch_size, cfg.seed)
    else:
        # the relative loss has a kink at zero residual, so finite differences
        # are unreliable near a good fit; backprop is checked on a fresh twin
        gap = check_gradients(build_network(ds, cfg, arch, train), train, cfg)
    if isinstance(params, FeedbackNetParams) and arch.get("stagewise"):
        stride = sensor_stride(params.n_u_sensors - 1, ds.manifest.n_cells)
        params, hist = train_feedback_stagewise(params, train, feedback_kernels(ds)[:, ::stride], cfg)
        if val is not None:
            hist.validation.append(evaluate(params, val, "pooled_relative_l2"))
    elif isinstance(params, FeedbackNetParams):
        params, hist = train_feedback_net(train, cfg, params.n_u_sensors, validation=val, params=params)
    else:
        params, hist = train_deeponet(train, cfg, validation=val, params=params)
    return params, hist, gap


def held_out_error(params, ds: Dataset, arch: dict) -> float:
    """Mean relative L2 on every sample (pooled over the batch for scalar controls)."""
    loss = "pooled_relative_l2" if isinstance(params, FeedbackNetParams) else "relative_l2"
    return evaluate(params, to_batch(ds, arch), loss)


def arch_from_params(params) -> dict:
    """Sensor layout of a trained network, enough to rebuild its input batches."""
    if isinstance(params, FeedbackNetParams):
        return {"sensor_cells": params.kernel_net.m - 1, "u_sensor_cells": params.n_u_sensors - 1}
    if isinstance(params, DeepONetParams) and params.query_dim == 2:
        return {"sensor_cells": int(round(np.sqrt(2 * params.m + 0.25) - 1.5))}
    return {"sensor_cells": params.m - 1}
