"""Exception types shared across the package."""


class SatRefineError(Exception):
    """Base class for all package-specific errors."""


class ContractError(SatRefineError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(SatRefineError, ValueError):
    """Array shapes do not conform for the requested operation."""


class UnsupportedFormatError(SatRefineError, ValueError):
    """Image has the wrong channel layout for the requested operation."""


class PlacementError(SatRefineError, ValueError):
    """A sprite placement falls outside the background."""


class LossError(SatRefineError, ValueError):
    """A loss function received non-finite or out-of-range inputs."""


class TrainingDivergenceError(SatRefineError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(SatRefineError, ValueError):
    """Base class for checkpoint load failures."""


class CheckpointBadMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class FeatFileError(SatRefineError, ValueError):
    """Base class for feature-file parse failures."""


class FeatBadMagicError(FeatFileError):
    pass


class FeatVersionError(FeatFileError):
    pass


class FeatCorruptError(FeatFileError):
    pass
