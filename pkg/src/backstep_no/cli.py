"""Command-line entry point: ``backstep-no <command> [flags]``.

Exit codes: 0 success, 1 a run or verification failed, 2 usage or I/O error.
Series go to CSV, manifests and reports to JSON; every output manifest
echoes the flags that produced it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .dataset import (
    ChebyshevSpec,
    UDistribution,
    chebyshev_beta,
    generate_feedback_dataset,
    generate_kernel1d_dataset,
    generate_kernel2d_dataset,
    load_dataset,
    product_f,
    save_dataset,
)
from .errors import (
    DatasetError,
    GradientCheckError,
    GridMismatchError,
    NonConvergenceError,
    SimulationDivergedError,
    TrainingDivergedError,
)
from .grid import GridFunction1D, TriangularGridFunction
from .kernel1d import KernelSolveConfig, residual_1d, solve_kernel
from .kernel2d import residual_2d, solve_kernel_2d
from .neural_operator import (
    DeepONetParams,
    FeedbackNetParams,
    kernel2d_from_deeponet,
    kernel_from_deeponet,
    load_model,
    save_model,
    smoothed_monotone,
)
from .pde_sim import (
    GainKernel,
    GainKernel2D,
    NeuralFeedback,
    OpenLoop,
    default_initial_condition,
    simulate_pide,
    simulate_transport,
)
from .pipeline import arch_from_params, recipe, held_out_error, train_on_dataset
from .stability import SimConfig, run_feedback_experiment, run_gain_experiment, run_pide_experiment

log = logging.getLogger("backstep_no")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _kernel_cfg(cfg: dict) -> KernelSolveConfig:
    keys = {f.name for f in fields(KernelSolveConfig)}
    return KernelSolveConfig(**{k: v for k, v in cfg.items() if k in keys})


def _read_beta_file(path: str) -> GridFunction1D:
    try:
        data = np.loadtxt(path, delimiter="," if path.endswith(".csv") else None, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if data.shape[1] == 2:
        x, values = data[:, 0], data[:, 1]
        if not np.allclose(x, np.linspace(0.0, 1.0, x.size), atol=1e-9):
            raise UsageError(f"{path}: x column must be a uniform grid on [0, 1]")
    elif data.shape[1] == 1:
        values = data[:, 0]
    else:
        raise UsageError(f"{path}: expected one column (beta) or two (x, beta), got {data.shape[1]}")
    if values.size < 2 or not np.all(np.isfinite(values)):
        raise UsageError(f"{path}: need at least two finite values")
    return GridFunction1D(values.size - 1, values)


def _parse_plant(spec: str, n_cells: int, amplitude: float):
    """('transport', beta) or ('pide', (g, f))."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "beta":
            return "transport", chebyshev_beta(ChebyshevSpec(float(arg), amplitude), n_cells)
        if kind == "pide":
            beta = chebyshev_beta(ChebyshevSpec(float(arg), amplitude), n_cells)
            return "pide", (GridFunction1D.constant(0.0, n_cells), product_f(beta))
    except ValueError as exc:
        raise UsageError(f"bad plant spec {spec!r}: {exc}") from exc
    path = arg if kind == "file" else spec
    if not Path(path).is_file():
        raise UsageError(f"plant spec {spec!r} is neither beta:GAMMA, pide:GAMMA nor a readable file")
    return "transport", _read_beta_file(path)


def _load_model(spec: str):
    path = spec.split(":", 1)[1]
    try:
        params, _ = load_model(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc
    return params


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# --- commands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    cfg = _kernel_cfg(_read_config(args.config))
    default_range = (2.0, 6.0) if args.kind == "feedback" else (2.0, 8.0)
    gamma_range = (args.gamma_min or default_range[0], args.gamma_max or default_range[1])
    common = dict(n=args.n, gamma_range=gamma_range, seed=args.seed, cfg=cfg, workers=args.workers)
    if args.kind == "kernel1d":
        ds = generate_kernel1d_dataset(n_cells=args.cells or 200, **common)
    elif args.kind == "feedback":
        ds = generate_feedback_dataset(n_cells=args.cells or 200, u_spec=UDistribution(), **common)
    else:
        ds = generate_kernel2d_dataset(n_cells=args.cells or 100, **common)
    out = save_dataset(ds, args.out)
    _write_json(out / "command.json", _flags(args))
    print(f"wrote {ds.manifest.n_samples} {args.kind} samples to {out}")
    return EXIT_OK


def cmd_solve_kernel(args) -> int:
    cfg = _kernel_cfg(_read_config(args.config))
    plant, data = _parse_plant(args.plant, args.cells or 200, args.amplitude)
    out = Path(args.out)
    if plant == "pide":
        g, f = data
        k = solve_kernel_2d(g, f, cfg)
        res = residual_2d(g, f, k)
        doc = {"kind": "kernel2d", "n_cells": k.n_cells, "kernel_packed": k.values.tolist(), "residual": res}
    else:
        beta = data
        k = solve_kernel(beta, cfg)
        res = residual_1d(beta, k)
        doc = {"kind": "kernel1d", "n_cells": k.n_cells, "x": beta.x.tolist(),
               "beta": beta.values.tolist(), "kernel": k.values.tolist(), "residual": res}
        if out.suffix == ".csv":
            out.parent.mkdir(parents=True, exist_ok=True)
            with out.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "beta", "k"])
                w.writerows(zip(beta.x, beta.values, k.values))
            print(f"residual {res:.3e}")
            return EXIT_OK
    _write_json(out, {**doc, "flags": _flags(args)})
    print(f"residual {res:.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        ds = load_dataset(args.dataset)
        test = load_dataset(args.test) if args.test else None
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    kind = ds.manifest.kind
    cfg, arch = recipe(kind, _read_config(args.config))
    out = Path(args.out)
    params = None
    if args.resume:
        if not (out / "model.json").is_file():
            raise UsageError(f"--resume given but {out} holds no model")
        params, _ = load_model(out)
        arch = {**arch, **arch_from_params(params)}
    if test is not None and test.manifest.kind != kind:
        raise UsageError(f"test set is {test.manifest.kind}, training set is {kind}")
    params, hist, gap = train_on_dataset(ds, cfg, arch, validation=test, params=params)
    save_model(params, out, {"kind": kind, "gradient_check": gap, "seed": cfg.seed, "train_config": asdict(cfg), "arch": arch,
                             "dataset": str(args.dataset), "flags": _flags(args)})
    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train", "validation"])
        for i, tr in enumerate(hist.train):
            w.writerow([i, tr, hist.validation[i] if hist.validation else ""])
    final = held_out_error(params, test if test is not None else ds, arch)
    label = "test" if test is not None else "train"
    print(f"final {label} relative L2 {final:.4e}")
    if not smoothed_monotone(hist.train):
        print("warning: smoothed training loss rose more than 10% above its running minimum")
    return EXIT_OK


def _controller(spec: str, plant: str, data):
    if spec == "open":
        return OpenLoop()
    if spec == "exact":
        if plant == "pide":
            return GainKernel2D(solve_kernel_2d(*data))
        return GainKernel(solve_kernel(data))
    if spec.startswith("model:"):
        params = _load_model(spec)
        if plant == "pide":
            if not isinstance(params, DeepONetParams) or params.query_dim != 2:
                raise UsageError("a PIDE plant needs a 2D kernel model")
            return GainKernel2D(kernel2d_from_deeponet(params, data[1]))
        if isinstance(params, FeedbackNetParams):
            return NeuralFeedback(params, data)
        if params.query_dim != 1:
            raise UsageError("a transport plant needs a 1D kernel or feedback model")
        return GainKernel(kernel_from_deeponet(params, data))
    raise UsageError(f"unknown controller {spec!r}; use open, exact or model:PATH")


def cmd_simulate(args) -> int:
    plant, data = _parse_plant(args.plant, args.cells or (100 if args.plant.startswith("pide") else 200),
                               args.amplitude)
    ctrl = _controller(args.controller, plant, data)
    if plant == "pide":
        n = data[0].n_cells
        rec = simulate_pide(*data, default_initial_condition(n), ctrl, args.t_final)
    else:
        n = data.n_cells
        rec = simulate_transport(data, default_initial_condition(n), ctrl, args.t_final)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t, x = rec.times, rec.x
    with (out / "trajectory.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "u"])
        for i, row in enumerate(rec.states):
            w.writerows(zip(np.full(x.size, t[i]), x, row))
    norms = rec.l2_norms()
    with (out / "controls.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "U", "l2_norm"])
        w.writerows(zip(t, rec.controls, norms))
    _write_json(out / "manifest.json", {"flags": _flags(args), "n_cells": n, "dt": rec.dt,
                                        "n_steps": rec.n_steps, "initial_condition": "sin(pi x) + 1",
                                        **rec.meta})
    print(f"|u(0)| = {norms[0]:.4e}, |u(T)| = {norms[-1]:.4e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    plant, data = _parse_plant(args.plant, args.cells or (100 if args.plant.startswith("pide") else 200),
                               args.amplitude)
    cfg = SimConfig(t_final=args.t_final)
    spec = args.controller
    if plant == "pide":
        if spec == "exact":
            k_hat = solve_kernel_2d(*data)
        elif spec == "zero":
            k_hat = TriangularGridFunction.constant(0.0, data[0].n_cells)
        else:
            k_hat = _load_model(spec)
        report = run_pide_experiment(*data, k_hat, cfg)
    else:
        beta = data
        if spec == "exact":
            model = solve_kernel(beta)
        elif spec == "zero":
            model = GridFunction1D.constant(0.0, beta.n_cells)
        elif spec.startswith("model:"):
            model = _load_model(spec)
        else:
            raise UsageError(f"unknown controller {spec!r}; use exact, zero or model:PATH")
        if isinstance(model, FeedbackNetParams):
            report = run_feedback_experiment(beta, model, cfg)
        else:
            report = run_gain_experiment(beta, model, cfg)
    doc = {**report.to_json(), "flags": _flags(args)}
    _write_json(Path(args.out), doc)
    for name, ok in report.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    for name, ok in report.flags.items():
        print(f"flag  {name} = {ok}")
    return EXIT_OK if report.passed else EXIT_FAILED


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backstep-no", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def plant_flags(sp):
        sp.add_argument("--plant", required=True, help="beta:GAMMA, pide:GAMMA, or a beta file (file:PATH)")
        sp.add_argument("--cells", type=int, default=None)
        sp.add_argument("--amplitude", type=float, default=6.0)

    g = sub.add_parser("gen-data", help="generate a training corpus")
    g.add_argument("--kind", choices=("kernel1d", "feedback", "kernel2d"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--gamma-min", type=float, default=None)
    g.add_argument("--gamma-max", type=float, default=None)
    g.add_argument("--cells", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve-kernel", help="solve the backstepping kernel for one plant")
    plant_flags(s)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help=".json or .csv")
    s.set_defaults(func=cmd_solve_kernel)

    t = sub.add_parser("train", help="train the network matching a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--test", default=None, help="held-out dataset for validation and the final error")
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("simulate", help="simulate one closed or open loop")
    plant_flags(m)
    m.add_argument("--controller", default="exact", help="open, exact or model:PATH")
    m.add_argument("--t-final", type=float, default=2.0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run a stability experiment; exit 1 if any verdict fails")
    plant_flags(v)
    v.add_argument("--controller", default="exact", help="exact, zero or model:PATH")
    v.add_argument("--t-final", type=float, default=2.0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, GridMismatchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonConvergenceError, TrainingDivergedError, GradientCheckError, SimulationDivergedError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
