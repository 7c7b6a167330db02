"""Exception types shared across the package."""

from __future__ import annotations


class MvMatchError(Exception):
    """Base class for all package errors."""


class ShapeError(MvMatchError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class NonFiniteError(MvMatchError, FloatingPointError):
    """A forward or backward value left the finite reals."""

    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        self.where = where
        super().__init__(f"non-finite values produced by {op} ({where})")


class DegenerateSpectrumError(MvMatchError):
    def __init__(self, gap: float, scale: float):
        self.gap = gap
        self.scale = scale
        super().__init__(
            f"smallest singular value is repeated (gap {gap:.3e} at scale {scale:.3e}); "
            "singular vector gradient undefined"
        )


class SingularSystemError(MvMatchError):
    def __init__(self, pivot_index: int, pivot: float):
        self.pivot_index = pivot_index
        self.pivot = pivot
        super().__init__(f"singular system: pivot {pivot_index} has magnitude {abs(pivot):.3e}")


class BehindCameraError(MvMatchError):
    pass


class DegenerateTriangulationError(MvMatchError):
    pass


class NoValidSolutionError(MvMatchError):
    pass


class DegenerateConfigurationError(MvMatchError):
    pass


class DivergenceError(MvMatchError):
    def __init__(self, iteration: int, what: str = "state"):
        self.iteration = iteration
        super().__init__(f"non-finite {what} at iteration {iteration}")


class ConfigError(MvMatchError, ValueError):
    pass


class LabelGenerationError(MvMatchError):
    pass


class GenerationError(MvMatchError):
    pass


class SamplingError(MvMatchError):
    pass


class DisconnectedGraphError(MvMatchError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"pose graph is disconnected: components {self.components}")


class CollinearityError(MvMatchError):
    pass
