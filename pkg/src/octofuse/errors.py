"""Exception hierarchy shared by every octofuse module."""


class OctofuseError(Exception):
    pass


class DimensionError(OctofuseError, ValueError):
    """Tensor extents do not line up for the requested op."""


class ConfigurationError(OctofuseError, ValueError):
    """A spec, config or call argument is inconsistent."""


class ContractError(OctofuseError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(OctofuseError, FloatingPointError):
    """An op produced NaN or Inf."""


class DataError(OctofuseError, ValueError):
    """Input data violates a value-range contract."""


class FormatError(OctofuseError, ValueError):
    """A file on disk does not match its declared binary layout."""


class TrainingError(OctofuseError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
