"""Exception types raised across the package.

Everything derives from NimbusError so callers can catch one base class.
Each subclass also derives from the closest builtin (ValueError, IOError)
to keep generic handlers working.
"""


class NimbusError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NimbusError, ValueError):
    """Tensor dimensions are inconsistent with what an operation requires."""


class SizeError(NimbusError, ValueError):
    """A size argument is invalid, e.g. a pool or resize target that cannot work."""


class ConfigError(NimbusError, ValueError):
    """A configuration value is missing, of the wrong type, or out of range."""


class FormatError(NimbusError, IOError):
    """A serialized file is malformed.  Messages include the byte offset at
    which the problem was detected whenever one is known."""


class StateError(NimbusError, RuntimeError):
    """An object was used in an order its contract forbids, e.g. stepping an
    optimizer whose state was built for a different parameter set."""


class DataError(NimbusError, ValueError):
    """A dataset or manifest is internally inconsistent."""


class ValidationError(NimbusError, ValueError):
    """An input value violates an operation's contract, e.g. non-binary
    targets under binary cross-entropy or an out-of-range index."""


class DegenerateBatchError(NimbusError, ValueError):
    """A training batch is unusable, e.g. empty after filtering or a
    single-element batch fed to batch normalization."""


class PoisonedGradientError(NimbusError, FloatingPointError):
    """A gradient contains NaN or Inf; applying it would corrupt the model."""
