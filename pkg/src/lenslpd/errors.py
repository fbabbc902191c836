"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`LensError`.
Data problems (bad files, wrong shapes, empty inputs) derive from
:class:`DataError`; numerical breakdowns derive from :class:`NumericalError`.
The CLI maps these two families to distinct exit codes.
"""


class LensError(Exception):
    pass


class DataError(LensError):
    pass


class NumericalError(LensError, ArithmeticError):
    pass


# file formats and containers
class IoFailure(DataError, OSError):
    pass


class MalformedHeader(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class NonFiniteData(DataError, ValueError):
    pass


class ZeroSizedField(DataError, ValueError):
    pass


class UnsupportedBitDepth(DataError):
    pass


class DomainMismatch(DataError, ValueError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class GeometryMismatch(ShapeMismatch):
    pass


# solvers / training
class NegativeThreshold(DataError, ValueError):
    pass


class DivergenceDetected(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class GraphCycle(LensError, RuntimeError):
    pass


class NonScalarLoss(LensError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


# calibration / datasets
class AllZeroCapture(DataError):
    pass


class TooFewPoints(DataError, ValueError):
    pass


class DegenerateConfiguration(DataError, ValueError):
    pass


class SingularHomography(DataError, ValueError):
    pass


class EmptyDirectory(DataError):
    pass


class UnreadableImage(DataError):
    pass


# evaluation
class ImageTooSmall(DataError, ValueError):
    pass


class CountMismatch(DataError):
    pass


class MissingPair(DataError):
    pass
