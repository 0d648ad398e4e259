"""Exception types raised across the package."""


class DynSolveError(Exception):
    """Base class for all package errors."""


# geometry
class AngleNearPi(DynSolveError):
    pass


class DegenerateConfiguration(DynSolveError):
    pass


class InvalidDisparity(DynSolveError):
    pass


# frame graph
class NoValidPixels(DynSolveError):
    pass


class ShapeMismatch(DynSolveError):
    pass


# bundle adjustment
class SingularSystem(DynSolveError):
    pass


class AllInvalid(DynSolveError):
    pass


# pipeline
class DegenerateScale(DynSolveError):
    pass


class InsufficientMotion(DynSolveError):
    pass


class TrackingLost(DynSolveError):
    pass


class NoNeighborKeyframe(DynSolveError):
    pass


# depth refinement
class NonFiniteLoss(DynSolveError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


# synthetic data
class SpecInfeasible(DynSolveError):
    pass


# file formats / metrics
class BadMagic(DynSolveError):
    pass


class TruncatedFile(DynSolveError):
    pass


class DimensionMismatch(DynSolveError):
    pass


class DegenerateTrajectory(DynSolveError):
    pass


class EmptyOverlap(DynSolveError):
    pass


class LayoutError(DynSolveError):
    """Dataset directory is missing a file or is inconsistent with its manifest."""
