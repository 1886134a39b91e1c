"""Exception hierarchy shared by every stage of the pipeline."""


class MMQError(Exception):
    """Base class; carries the CLI exit code for the failure family."""

    exit_code = 1


class ConfigError(MMQError, ValueError):
    exit_code = 2


class DataError(MMQError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class CapacityError(MMQError):
    exit_code = 4


class DimensionError(MMQError, ValueError):
    pass


class LabelError(MMQError, ValueError):
    pass


class ContractError(MMQError, RuntimeError):
    pass


class DegeneracyError(MMQError, ArithmeticError):
    pass
