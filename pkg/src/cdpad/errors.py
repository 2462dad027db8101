"""Exception hierarchy shared by every cdpad module."""


class CDPADError(Exception):
    """Base class for all structured errors raised by cdpad."""


class ShapeError(CDPADError, ValueError):
    """Tensor shapes or channel counts are incompatible."""


class ConfigError(CDPADError, ValueError):
    """A configuration value or key is invalid."""


class StageError(CDPADError, RuntimeError):
    """A training stage was invoked before its prerequisites ran."""


class FormatError(CDPADError, ValueError):
    """A serialized checkpoint, dataset or score file is malformed."""


class MissingClassError(CDPADError, ValueError):
    """A score set lacks bonafide or attack samples."""
