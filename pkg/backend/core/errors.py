class FuseposeError(Exception):
    """Base class for every domain error raised by the pipeline."""


class InvalidInputError(FuseposeError, ValueError):
    pass


class EventBoundsError(FuseposeError):
    def __init__(self, index: int, x: int, y: int, width: int, height: int):
        self.index = index
        super().__init__(f"event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")


class SingularFitError(FuseposeError):
    pass


class PnPSolverError(FuseposeError):
    pass


class InsufficientCorrespondencesError(InvalidInputError):
    pass


class UndefinedCMKDError(FuseposeError):
    pass


class BundleFormatError(FuseposeError):
    pass
