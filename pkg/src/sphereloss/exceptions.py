"""Exception hierarchy shared by every submodule."""


class SphereLossError(Exception):
    """Base class for all errors raised by this package."""


class ZeroVector(SphereLossError, ValueError):
    pass


class DimensionMismatch(SphereLossError, ValueError):
    pass


class UnsupportedRole(SphereLossError, ValueError):
    pass


class LabelOutOfRange(SphereLossError, ValueError):
    pass


class NonFiniteInput(SphereLossError, ValueError):
    pass


class NonFiniteGradient(SphereLossError, FloatingPointError):
    pass


class ShapeMismatch(SphereLossError, ValueError):
    pass


class StaleCache(SphereLossError, RuntimeError):
    pass


class ConfigInvalid(SphereLossError, ValueError):
    pass


class ShapeInferenceFailure(SphereLossError, ValueError):
    def __init__(self, layer_index, message):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class InsufficientSamples(SphereLossError, ValueError):
    pass


class EmptyFold(SphereLossError, ValueError):
    pass


class NoNegatives(SphereLossError, ValueError):
    pass


class MissingGalleryIdentity(SphereLossError, ValueError):
    pass


class ConfigParseError(SphereLossError, ValueError):
    pass


class NoRunsFound(SphereLossError, FileNotFoundError):
    pass


class DuplicateRun(SphereLossError, ValueError):
    pass
