"""Exception types raised across the package."""


class UvSplatError(Exception):
    """Base class for all package errors."""


class InvalidMesh(UvSplatError, ValueError):
    pass


class ZeroNormal(UvSplatError, ValueError):
    pass


class InvalidConfig(UvSplatError, ValueError):
    pass


class OverlappingCharts(UvSplatError, ValueError):
    pass


class EmptyScan(UvSplatError, ValueError):
    pass


class LevelMismatch(UvSplatError, ValueError):
    pass


class DegenerateQuaternion(UvSplatError, ValueError):
    pass


class IncompleteMaps(UvSplatError, ValueError):
    pass


class StaleState(UvSplatError, RuntimeError):
    pass


class ShapeMismatch(UvSplatError, ValueError):
    pass


class CountMismatch(UvSplatError, ValueError):
    pass


class NonFiniteLoss(UvSplatError, FloatingPointError):
    def __init__(self, iteration, value):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class BehindCamera(UvSplatError, ValueError):
    pass
