"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Two grid functions that must share a grid do not."""


class NonConvergenceError(RuntimeError):
    """A successive-approximation solve hit its term budget."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class SimulationDivergedError(RuntimeError):
    """A closed- or open-loop state stopped being finite."""


class DatasetError(ValueError):
    """Base class for dataset persistence failures."""


class DatasetVersionError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


class DatasetKindError(DatasetError):
    pass


class GradientCheckError(RuntimeError):
    """Backprop gradients disagree with finite differences before training."""
