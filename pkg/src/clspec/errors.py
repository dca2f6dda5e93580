"""Exception hierarchy shared by all modules."""


class ClspecError(Exception):
    """Base class for every error raised by the package."""


# ensemble -----------------------------------------------------------------

class ProfileError(ClspecError, ValueError):
    pass


class ViolatedGammaBound(ProfileError):
    pass


class ViolatedFlatness(ProfileError):
    pass


class ViolatedSparsity(ProfileError):
    def __init__(self, message, index=None, value=None):
        super().__init__(message)
        self.index = index
        self.value = value


class MuOutOfRange(ProfileError):
    pass


class DomainViolation(ProfileError):
    pass


# solvers -----------------------------------------------------------------

class NoConvergence(ClspecError, ArithmeticError):
    """Iteration budget exhausted; ``best`` holds the best iterate seen."""

    def __init__(self, message, best=None, residual=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations


class LeftUpperHalfPlane(ClspecError, ArithmeticError):
    """An iterate left the upper half-plane after the damping floor was reached."""


class GridSolveError(ClspecError):
    """Wraps a solver error with the grid index at which it happened."""

    def __init__(self, index, z, cause):
        super().__init__(f"grid point {index} (z={z}) failed: {cause}")
        self.index = index
        self.z = z
        self.cause = cause


# spectral ----------------------------------------------------------------

class DecompositionFailure(ClspecError):
    pass


class VectorsNotRetained(ClspecError):
    pass


class EmptyBulk(ClspecError):
    pass


# harness -----------------------------------------------------------------

class BulkValidationFailed(ClspecError):
    pass


class TooFewEigenvalues(ClspecError):
    pass


class DegenerateDegrees(ClspecError):
    pass


class SampleFailure(ClspecError):
    """A per-sample failure carrying the (z, seed) context."""

    def __init__(self, seed, cause, z=None):
        where = f"seed={seed}" if z is None else f"z={z}, seed={seed}"
        super().__init__(f"{where}: {cause}")
        self.seed = seed
        self.z = z
        self.cause = cause


# cli ---------------------------------------------------------------------

class SchemaViolation(ClspecError, ValueError):
    """Carries every violation found, as ``(path, message)`` pairs."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{path or '<root>'}: {msg}" for path, msg in self.violations]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))
