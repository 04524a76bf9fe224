"""PDE backstepping with neural-operator gain kernels.

Exact kernel solvers for the transport plant with recirculation and for the
hyperbolic PIDE, closed-loop simulators, numpy DeepONets that learn the
kernel and feedback maps, and checks of the resulting stability estimates.
"""

from .errors import (
    DatasetChecksumError,
    DatasetError,
    DatasetKindError,
    DatasetVersionError,
    GridMismatchError,
    NonConvergenceError,
    TrainingDivergedError,
)
from .grid import (
    GridFunction1D,
    TriangularGridFunction,
    convolve,
    l2_norm,
    sup_norm,
    trapezoid_integrate,
)
from .kernel1d import (
    KernelSolveConfig,
    kernel_sup_bound,
    lipschitz_bound,
    perturbation_gap,
    residual_1d,
    solve_inverse_kernel,
    solve_kernel,
)
from .kernel2d import bounds_2d, kernel_partials, residual_2d, solve_inverse_kernel_2d, solve_kernel_2d
from .pde_sim import (
    GainKernel,
    GainKernel2D,
    NeuralFeedback,
    ObserverBased,
    OpenLoop,
    TrajectoryRecord,
    control_1d,
    control_2d,
    forward_transform,
    inverse_transform,
    observer_state,
    simulate_pide,
    simulate_transport,
)

__version__ = "0.1.0"
