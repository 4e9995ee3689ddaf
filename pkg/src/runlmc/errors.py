"""Exception hierarchy shared by all modules."""


class DataError(ValueError):
    """Input data is malformed or cannot support the requested operation."""


class InsufficientData(DataError):
    """Not enough observed entries or donor rows to make a prediction."""


class ParseError(DataError):
    """A line of a raw input file could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
