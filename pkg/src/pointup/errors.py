"""Exception types shared across the package."""


class PointUpError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PointUpError, ValueError):
    """An argument is out of its valid range or inconsistent with the data."""


class InvalidInputError(PointUpError, ValueError):
    """Input data is malformed (non-finite coordinates, empty file, ...)."""


class DegenerateGeometryError(PointUpError, ValueError):
    """Geometry for which the requested construction is undefined."""


class ParseError(PointUpError, ValueError):
    """A file could not be parsed.  ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class UnsupportedFaceError(ParseError):
    """A mesh face is not a triangle."""


class DivergedError(PointUpError, RuntimeError):
    """Optimization produced a non-finite loss; ``trace`` holds what was recorded."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
