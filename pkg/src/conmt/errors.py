"""Exception hierarchy shared by all modules."""


class ConmtError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(ConmtError, ValueError):
    pass


class DegenerateRowError(ConmtError, ValueError):
    """A mixed embedding row collapsed to the zero vector."""

    def __init__(self, row: int):
        super().__init__(f"row {row} is the zero vector after mixing")
        self.row = row


class DegenerateHiddenStateError(ConmtError, ValueError):
    pass


class TableParseError(ConmtError, ValueError):
    """Malformed embedding file; ``location`` is a line number or byte offset."""

    def __init__(self, message: str, location: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class UnsupportedIndexError(ConmtError, TypeError):
    pass


class TrainingDivergedError(ConmtError, RuntimeError):
    pass
