"""Exception hierarchy shared across the package."""


class GaitError(Exception):
    """Base class for every error raised by glgait."""


class ConfigurationError(GaitError, ValueError):
    """Shapes, axes or layer settings that cannot work together."""


class InputTooSmallError(ConfigurationError):
    """An input axis is too short for the kernel or the network minimum."""


class ContractError(GaitError, RuntimeError):
    """An API precondition was violated by the caller."""


class ParameterDomainError(GaitError, ValueError):
    """A parameter left its admissible domain (e.g. GeM exponent p <= 0)."""


class SamplingError(GaitError, ValueError):
    """The dataset cannot supply a valid P x K batch."""


class DataError(GaitError, ValueError):
    """Malformed or unusable silhouette data."""


class CheckpointError(GaitError, ValueError):
    """Unreadable or inconsistent checkpoint / embedding file."""


class TrainingHalted(GaitError, RuntimeError):
    """Training stopped on a non-finite loss or gradient."""
