class SlifError(Exception):
    """Base class for library errors."""


class ConfigError(SlifError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class ParseError(SlifError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ValidationError(SlifError, ValueError):
    """Parsed data violates a declared range or invariant."""


class EmptyDatasetError(SlifError, ValueError):
    pass


class FormatError(SlifError, ValueError):
    """A binary file does not have the expected layout."""


class TrainingError(SlifError, RuntimeError):
    pass
