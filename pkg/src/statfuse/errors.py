"""Exception hierarchy shared by every statfuse module."""


class StatfuseError(ValueError):
    """Base class for all data and domain errors raised by statfuse."""


class DomainError(StatfuseError):
    """An argument lies outside the domain of a function."""


class ShapeError(StatfuseError):
    """Arrays that must be aligned have mismatching shapes."""


class DegenerateError(StatfuseError):
    """A statistic is undefined because the data behind it is empty."""


class ModelMismatchError(StatfuseError):
    """A fusion model does not cover the inputs it is asked to fuse."""


class FormatError(StatfuseError):
    """A binary file violates the tensor layout.

    ``offset`` is the byte offset of the violation when it is known.
    """

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.offset = offset


class ParseError(StatfuseError):
    """A text file violates its grammar; ``lineno`` is 1-based."""

    def __init__(self, message, path=None, lineno=None):
        where = str(path) if path is not None else "<model>"
        if lineno is not None:
            where += f", line {lineno}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno
