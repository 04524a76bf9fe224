"""Training corpora for the three learned maps, and their on-disk format.

A dataset directory holds ``manifest.json``, one little-endian float64 blob
per array and ``checksums.txt`` (sha256 of every blob and the manifest).
Each sample draws its randomness from ``default_rng([seed, index])``, so
serial and parallel generation give the same arrays.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetChecksumError, DatasetKindError, DatasetVersionError, NonConvergenceError
from .grid import GridFunction1D, TriangularGridFunction
from .kernel1d import DEFAULT_CONFIG, KernelSolveConfig, residual_1d, solve_kernel
from .kernel2d import residual_2d, solve_kernel_2d
from .pde_sim import control_1d

FORMAT_VERSION = 1
KINDS = ("kernel1d", "feedback", "kernel2d")
BLOBS = {
    "kernel1d": ("betas", "kernels"),
    "feedback": ("betas", "u", "controls"),
    "kernel2d": ("f", "kernels2d"),
}


@dataclass(frozen=True)
class ChebyshevSpec:
    """beta(x) = amplitude * cos(gamma * arccos(x))."""

    gamma: float
    amplitude: float = 6.0

    def __post_init__(self):
        if not self.amplitude > 0 or not self.gamma > 0:
            raise ValueError("amplitude and gamma must be positive")


def chebyshev_beta(spec: ChebyshevSpec, n_cells: int) -> GridFunction1D:
    return GridFunction1D.from_callable(
        lambda x: spec.amplitude * np.cos(spec.gamma * np.arccos(x)), n_cells
    )


def product_f(beta: GridFunction1D) -> TriangularGridFunction:
    """f(x, y) = beta(x) beta(y) on the triangle."""
    i, j = np.tril_indices(beta.n_cells + 1)
    return TriangularGridFunction(beta.n_cells, beta.values[i] * beta.values[j])


@dataclass(frozen=True)
class UDistribution:
    """u(x) = sum_j c_j T_j(2x - 1), j < n_terms, c_j ~ U[-1, 1], rescaled so sup|u| <= bound.

    With n_terms <= bound the raw sum already satisfies the bound; otherwise
    coefficients are scaled by bound / n_terms. ``bound = 0`` gives u = 0.
    """

    n_terms: int = 6
    bound: float = 6.0

    def __post_init__(self):
        if self.n_terms < 1 or self.bound < 0:
            raise ValueError("n_terms must be >= 1 and bound >= 0")

    def sample(self, rng: np.random.Generator, n_cells: int) -> np.ndarray:
        coef = rng.uniform(-1.0, 1.0, self.n_terms) * min(1.0, self.bound / self.n_terms)
        x = np.linspace(0.0, 1.0, n_cells + 1)
        return np.polynomial.chebyshev.chebval(2 * x - 1, coef)


@dataclass
class DatasetManifest:
    kind: str
    n_samples: int
    n_cells: int
    gamma_range: tuple[float, float]
    seed: int
    amplitude: float = 6.0
    u_distribution: dict | None = None
    solver: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetKindError(f"unknown dataset kind {self.kind!r}")
        self.gamma_range = tuple(float(g) for g in self.gamma_range)

    def to_json(self) -> dict:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        return d


@dataclass
class Dataset:
    manifest: DatasetManifest
    arrays: dict[str, np.ndarray]
    gammas: np.ndarray

    def __len__(self) -> int:
        return self.manifest.n_samples


def _check_args(n: int, gamma_range, n_cells: int):
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    lo, hi = gamma_range
    if not 0 < lo <= hi:
        raise ValueError(f"gamma range must satisfy 0 < min <= max, got {gamma_range}")
    if n_cells < 1:
        raise ValueError("n_cells must be positive")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _kernel1d_sample(args):
    seed, index, gamma_range, n_cells, amplitude, cfg = args
    rng = _sample_rng(seed, index)
    gamma = rng.uniform(*gamma_range)
    beta = chebyshev_beta(ChebyshevSpec(gamma, amplitude), n_cells)
    try:
        k = solve_kernel(beta, cfg)
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"sample {index} (gamma={gamma!r}): {exc}") from exc
    return gamma, beta.values, k.values


def _feedback_sample(args):
    seed, index, gamma_range, n_cells, amplitude, cfg, u_dist = args
    rng = _sample_rng(seed, index)
    gamma = rng.uniform(*gamma_range)
    beta = chebyshev_beta(ChebyshevSpec(gamma, amplitude), n_cells)
    u = u_dist.sample(rng, n_cells)
    try:
        k = solve_kernel(beta, cfg)
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"sample {index} (gamma={gamma!r}): {exc}") from exc
    return gamma, beta.values, u, control_1d(k, GridFunction1D(n_cells, u))


def _kernel2d_sample(args):
    seed, index, gamma_range, n_cells, amplitude, cfg = args
    rng = _sample_rng(seed, index)
    gamma = rng.uniform(*gamma_range)
    f = product_f(chebyshev_beta(ChebyshevSpec(gamma, amplitude), n_cells))
    try:
        k = solve_kernel_2d(GridFunction1D.constant(0.0, n_cells), f, cfg)
    except NonConvergenceError as exc:
        raise NonConvergenceError(f"sample {index} (gamma={gamma!r}): {exc}") from exc
    return gamma, f.values, k.values


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def generate_kernel1d_dataset(n: int, gamma_range=(2.0, 8.0), n_cells: int = 200, seed: int = 0,
                              cfg: KernelSolveConfig = DEFAULT_CONFIG, amplitude: float = 6.0,
                              workers: int = 1) -> Dataset:
    _check_args(n, gamma_range, n_cells)
    rows = _map(_kernel1d_sample, [(seed, i, gamma_range, n_cells, amplitude, cfg) for i in range(n)], workers)
    gammas, betas, kernels = (np.array(c) for c in zip(*rows))
    manifest = DatasetManifest("kernel1d", n, n_cells, gamma_range, seed, amplitude, solver=asdict(cfg))
    return Dataset(manifest, {"betas": betas, "kernels": kernels}, gammas)


def generate_feedback_dataset(n: int, gamma_range=(2.0, 6.0), u_spec: UDistribution = UDistribution(),
                              n_cells: int = 200, seed: int = 0, cfg: KernelSolveConfig = DEFAULT_CONFIG,
                              amplitude: float = 6.0, workers: int = 1) -> Dataset:
    _check_args(n, gamma_range, n_cells)
    jobs = [(seed, i, gamma_range, n_cells, amplitude, cfg, u_spec) for i in range(n)]
    rows = _map(_feedback_sample, jobs, workers)
    gammas, betas, us, controls = (np.array(c) for c in zip(*rows))
    manifest = DatasetManifest(
        "feedback", n, n_cells, gamma_range, seed, amplitude,
        u_distribution={"family": "chebyshev", **asdict(u_spec)}, solver=asdict(cfg),
    )
    return Dataset(manifest, {"betas": betas, "u": us, "controls": controls}, gammas)


def generate_kernel2d_dataset(n: int, gamma_range=(2.0, 8.0), n_cells: int = 100, seed: int = 0,
                              cfg: KernelSolveConfig = DEFAULT_CONFIG, amplitude: float = 6.0,
                              workers: int = 1) -> Dataset:
    _check_args(n, gamma_range, n_cells)
    rows = _map(_kernel2d_sample, [(seed, i, gamma_range, n_cells, amplitude, cfg) for i in range(n)], workers)
    gammas, fs, kernels = (np.array(c) for c in zip(*rows))
    manifest = DatasetManifest("kernel2d", n, n_cells, gamma_range, seed, amplitude, solver=asdict(cfg))
    return Dataset(manifest, {"f": fs, "kernels2d": kernels}, gammas)


# --- persistence ---------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kind = ds.manifest.kind
    arrays = {**{name: ds.arrays[name] for name in BLOBS[kind]}, "gammas": ds.gammas}
    ds.manifest.shapes = {name: list(a.shape) for name, a in arrays.items()}
    sums = {}
    for name, a in arrays.items():
        data = np.ascontiguousarray(a, dtype="<f8").tobytes()
        (path / f"{name}.f64").write_bytes(data)
        sums[f"{name}.f64"] = _sha256(data)
    manifest_bytes = json.dumps(ds.manifest.to_json(), indent=2, sort_keys=True).encode()
    (path / "manifest.json").write_bytes(manifest_bytes)
    sums["manifest.json"] = _sha256(manifest_bytes)
    (path / "checksums.txt").write_text("".join(f"{h}  {name}\n" for name, h in sorted(sums.items())))
    return path


def _read_checksums(path: Path) -> dict[str, str]:
    sums = {}
    for line in (path / "checksums.txt").read_text().splitlines():
        if line.strip():
            digest, name = line.split(None, 1)
            sums[name.strip()] = digest
    return sums


def load_dataset(path, kind: str | None = None, spot_check: float = 0.05, seed: int = 0) -> Dataset:
    """Load and verify a dataset directory.

    Every blob is checked against ``checksums.txt`` before anything is
    parsed. ``spot_check`` is the fraction of kernel targets whose solver
    residual is recomputed (0 disables it).
    """
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in {path}")
    sums = _read_checksums(path)
    raw = (path / "manifest.json").read_bytes()
    if sums.get("manifest.json") != _sha256(raw):
        raise DatasetChecksumError(f"{path / 'manifest.json'}: checksum mismatch")
    doc = json.loads(raw)
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset format {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    if kind is not None and doc["kind"] != kind:
        raise DatasetKindError(f"expected a {kind} dataset, found {doc['kind']}")
    manifest = DatasetManifest(**{**doc, "gamma_range": tuple(doc["gamma_range"])})
    arrays = {}
    for name, shape in manifest.shapes.items():
        data = (path / f"{name}.f64").read_bytes()
        if sums.get(f"{name}.f64") != _sha256(data):
            raise DatasetChecksumError(f"{path / (name + '.f64')}: checksum mismatch")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    gammas = arrays.pop("gammas")
    ds = Dataset(manifest, arrays, gammas)
    if spot_check > 0:
        verify_targets(ds, spot_check, seed)
    return ds


def verify_targets(ds: Dataset, fraction: float = 0.05, seed: int = 0, slack: float = 10.0) -> None:
    """Recompute solver residuals on a random subset of kernel targets."""
    m = ds.manifest
    if m.kind == "feedback":
        return
    n_check = max(1, math.ceil(fraction * m.n_samples))
    picks = np.random.default_rng(seed).choice(m.n_samples, min(n_check, m.n_samples), replace=False)
    tol = slack * m.solver.get("tolerance", DEFAULT_CONFIG.tolerance)
    for i in picks:
        if m.kind == "kernel1d":
            beta = GridFunction1D(m.n_cells, ds.arrays["betas"][i])
            r = residual_1d(beta, GridFunction1D(m.n_cells, ds.arrays["kernels"][i]))
        else:
            g = GridFunction1D.constant(0.0, m.n_cells)
            f = TriangularGridFunction(m.n_cells, ds.arrays["f"][i])
            r = residual_2d(g, f, TriangularGridFunction(m.n_cells, ds.arrays["kernels2d"][i]))
        if not r <= tol:
            raise DatasetChecksumError(f"sample {i}: stored kernel has residual {r:.2e} > {tol:.1e}")

