"""Exception types raised across the package."""


class VprCalibError(Exception):
    """Base class for all package errors."""


class NearPiRotation(VprCalibError, ValueError):
    pass


class DimensionMismatch(VprCalibError, ValueError):
    pass


class DuplicateKeyframe(VprCalibError, ValueError):
    pass


class UnknownKeyframe(VprCalibError, KeyError):
    pass


class EmptyStore(VprCalibError, ValueError):
    pass


class UnknownNode(VprCalibError, KeyError):
    pass


class NonChainOdometry(VprCalibError, ValueError):
    pass


class NonSpdInformation(VprCalibError, ValueError):
    pass


class MalformedLine(VprCalibError, ValueError):
    def __init__(self, line_no, message=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class MissingVertex(VprCalibError, ValueError):
    pass


class SingularNormalEquations(VprCalibError, ArithmeticError):
    pass


class InputLengthMismatch(VprCalibError, ValueError):
    pass


class SchemaViolation(VprCalibError, ValueError):
    pass


class IoFailure(VprCalibError, OSError):
    pass


class DegenerateDistance(VprCalibError, ArithmeticError):
    pass


class RejectedTupleInTrainingSet(VprCalibError, ValueError):
    pass


class MissingDescriptor(VprCalibError, KeyError):
    pass


class InvalidConfig(VprCalibError, ValueError):
    pass


class EmptyThresholds(VprCalibError, ValueError):
    pass


class EmptyTuples(VprCalibError, ValueError):
    pass
