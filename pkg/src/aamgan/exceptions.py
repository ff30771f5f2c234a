"""Exception hierarchy shared by all modules."""


class AAMError(Exception):
    """Base class for every error raised by aamgan."""


class ShapeMismatchError(AAMError, ValueError):
    pass


class DegenerateGeometryError(AAMError, ValueError):
    pass


class InsufficientDataError(AAMError, ValueError):
    pass


class DimensionError(AAMError, ValueError):
    pass


class MissingPriorError(AAMError, RuntimeError):
    """A GAN-based operation was requested without trained networks."""


class NumericalError(AAMError, ArithmeticError):
    pass


class TensorShapeError(AAMError, ValueError):
    def __init__(self, op, *shapes):
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shape_txt}")
        self.op = op
        self.shapes = shapes


# file formats ---------------------------------------------------------------

class FormatError(AAMError, IOError):
    pass


class ContainerFormatError(FormatError):
    pass


class ContainerVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class PTSParseError(FormatError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line
