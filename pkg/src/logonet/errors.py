"""Exception types shared across the library."""


class LogoNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LogoNetError):
    """Incompatible shapes, or an op window that produces no output."""


class ParameterError(LogoNetError):
    """An argument is outside its documented range."""


class NumericError(LogoNetError):
    """A computation produced NaN or Inf on finite inputs."""


class DataError(LogoNetError):
    """A dataset record is malformed (bad label, bad box, ...)."""


class FormatError(LogoNetError):
    """A file payload cannot be parsed (PPM, checkpoint, manifest)."""


class LayoutError(LogoNetError):
    """A dataset root is missing required directories or split lists."""


class BuildError(LogoNetError):
    """A network spec does not compose into a runnable graph."""


class UnknownHeadError(LogoNetError):
    """A head name does not exist in the network."""


class ConfigError(LogoNetError):
    """A run configuration is internally inconsistent."""


class TrainingError(LogoNetError):
    """Training diverged (non-finite loss)."""


class CheckpointMismatchError(FormatError):
    """Checkpoint fingerprint does not match the expected network spec."""
