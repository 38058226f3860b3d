"""Exception types shared across the package."""


class PopcontrastError(Exception):
    """Base class; every error raised by this package derives from it."""

    code = "Error"


class ShapeMismatch(PopcontrastError):
    code = "ShapeMismatch"


class NonFiniteValue(PopcontrastError):
    code = "NonFiniteValue"


class GraphReuse(PopcontrastError):
    code = "GraphReuse"


class NondeterministicFunction(PopcontrastError):
    code = "NondeterministicFunction"


class MissingGradient(PopcontrastError):
    code = "MissingGradient"


class NonDivisibleWindow(PopcontrastError):
    code = "NonDivisibleWindow"


class WindowOutOfRange(PopcontrastError):
    code = "WindowOutOfRange"


class SchemaError(PopcontrastError):
    code = "SchemaError"


class MissingActivity(PopcontrastError):
    code = "MissingActivity"


class RecordingTooShort(PopcontrastError):
    code = "RecordingTooShort"


class GroupTooSmall(PopcontrastError):
    code = "GroupTooSmall"


class EmptyView(PopcontrastError):
    code = "EmptyView"


class IndexOutOfRange(PopcontrastError):
    code = "IndexOutOfRange"


class OddHeadDim(PopcontrastError):
    code = "OddHeadDim"


class ZeroVector(PopcontrastError):
    code = "ZeroVector"


class EmptyMatched(PopcontrastError):
    code = "EmptyMatched"


class EmptyDenominator(PopcontrastError):
    code = "EmptyDenominator"


class AllEmpty(PopcontrastError):
    code = "AllEmpty"


class SingleClass(PopcontrastError):
    code = "SingleClass"


class SplitLeakage(PopcontrastError):
    code = "SplitLeakage"


class NonDivisibleBin(PopcontrastError):
    code = "NonDivisibleBin"


class ConfigError(PopcontrastError):
    code = "ConfigError"
