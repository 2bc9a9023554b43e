"""Exception hierarchy shared across the package."""


class CLKNNError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(CLKNNError, ValueError):
    """Vector widths disagree with the container or model they are used with."""


class TokenRangeError(CLKNNError, ValueError):
    """A token id falls outside ``[0, vocab_size)``."""


class NonFiniteError(CLKNNError, ValueError):
    """A vector carries NaN or Inf components."""


class DegenerateVectorError(CLKNNError, ValueError):
    """A vector has (near) zero norm where a direction is required."""


class UnsampleableAnchorError(CLKNNError):
    """The anchor's cluster has no other member to draw a positive from."""


class InsufficientClustersError(CLKNNError):
    """Fewer candidate clusters exist than negatives requested."""


class FormatError(CLKNNError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
