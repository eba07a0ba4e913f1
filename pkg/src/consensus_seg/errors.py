"""Exception types shared across the toolkit."""


class ConsensusSegError(Exception):
    """Base class for every error raised by this package."""


class InvalidVolume(ConsensusSegError, ValueError):
    pass


class MalformedHeader(ConsensusSegError, ValueError):
    pass


class UnsupportedDatatype(ConsensusSegError, ValueError):
    pass


class TruncatedData(ConsensusSegError, ValueError):
    pass


class IndexOutOfRange(ConsensusSegError, IndexError):
    pass


class ShapeMismatch(ConsensusSegError, ValueError):
    pass


class EmptyMask(ConsensusSegError, ValueError):
    pass


class EmptyComparison(ConsensusSegError, ValueError):
    pass


class EmptyGroundTruth(ConsensusSegError, ValueError):
    pass


class NoBackground(ConsensusSegError, ValueError):
    pass


class ConstantVolume(ConsensusSegError, ValueError):
    pass


class PatchTooLarge(ConsensusSegError, ValueError):
    pass


class OutOfRange(ConsensusSegError, ValueError):
    pass


class AllZeroDifferences(ConsensusSegError, ValueError):
    pass


class EmptyInput(ConsensusSegError, ValueError):
    pass


class DegenerateInput(UserWarning):
    """A rater mask is constant over the STAPLE computation region."""
