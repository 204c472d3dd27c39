"""Exception types shared across the package."""


class WinWinError(Exception):
    pass


class InvalidSpec(WinWinError, ValueError):
    """A sampler or tiling spec is malformed or exceeds the grid."""


class InfeasibleSpec(WinWinError, RuntimeError):
    """No non-overlapping placement could be found."""


class ShapeMismatch(WinWinError, ValueError):
    pass


class WindowTooSmall(WinWinError, ValueError):
    pass


class EmptyMask(WinWinError, ValueError):
    """A loss or metric was asked to average over zero pixels."""


class TrainingDiverged(WinWinError, RuntimeError):
    pass
