"""Exception hierarchy shared across the package."""


class ConfilterError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ConfilterError):
    """Operands or data with incompatible shapes."""


class GraphError(ConfilterError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, detached tensor)."""


class NumericFault(ConfilterError):
    """NaN or Inf appeared in values, gradients, or parameter updates."""


class ConfigError(ConfilterError):
    """Invalid configuration, spec, or file contents."""


class FormatError(ConfigError):
    """Malformed or truncated serialized artifact (tensor record, checkpoint, bundle)."""
