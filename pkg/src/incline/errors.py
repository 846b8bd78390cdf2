"""Exception hierarchy shared by all incline modules."""


class InclineError(Exception):
    """Base class for every error raised by this package."""


# linalg
class DimensionMismatch(InclineError, ValueError):
    pass


class NotPositiveDefinite(InclineError, ArithmeticError):
    pass


class DegenerateData(InclineError, ValueError):
    pass


# model
class InvalidConfig(InclineError, ValueError):
    pass


class TokenOutOfRange(InclineError, ValueError):
    pass


class SequenceTooLong(InclineError, ValueError):
    pass


class InvalidDataset(InclineError, ValueError):
    pass


class FormatVersionMismatch(InclineError):
    pass


# corpus / file formats
class InvalidSpec(InclineError, ValueError):
    pass


class NotALanguageAToken(InclineError, ValueError):
    pass


class ParseError(InclineError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


# align / intervene / eval
class SiteMismatch(InclineError, ValueError):
    pass


class MissingSiteMatrix(InclineError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing site matrix"


class MissingSiteVector(InclineError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing site vector"


class DimMismatch(DimensionMismatch):
    pass


class ItemMismatch(InclineError, ValueError):
    pass


class DegenerateLabels(InclineError, ValueError):
    pass
