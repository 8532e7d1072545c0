"""Exception types raised across the package."""


class HybridSplatError(Exception):
    pass


class DomainError(HybridSplatError, ValueError):
    """A constrained parameter left its valid domain (e.g. sky xz outside the disc)."""


class FormatError(HybridSplatError, ValueError):
    pass


class MissingFrame(HybridSplatError, FileNotFoundError):
    def __init__(self, index):
        super().__init__(f"MissingFrame({index})")
        self.index = index


class DegenerateRays(HybridSplatError, ValueError):
    pass


class BehindCamera(HybridSplatError, ValueError):
    pass


class DegenerateCloud(HybridSplatError, ValueError):
    pass


class VerticalPlane(HybridSplatError, ValueError):
    pass


class StaleState(HybridSplatError, RuntimeError):
    """Backward was called with a RenderOutput produced from a different scene state."""


class DimensionMismatch(HybridSplatError, ValueError):
    pass


class NonFiniteGradient(HybridSplatError, FloatingPointError):
    pass


class EmptyVolume(HybridSplatError, ValueError):
    pass
