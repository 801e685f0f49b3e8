class VitQuantError(Exception):
    """Base error. `code` is stable and machine-parsable, `exit_code` is the CLI status."""

    code = "error"
    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        details = " ".join(f"{key}={value}" for key, value in sorted(self.context.items()))
        return f"{self.message} ({details})"


class ShapeError(VitQuantError):
    code = "shape"
    exit_code = 3


class ConfigError(VitQuantError):
    code = "config"
    exit_code = 2


class CalibrationError(VitQuantError):
    code = "calibration"
    exit_code = 4


class ContractError(VitQuantError):
    code = "contract"
    exit_code = 5


class DomainError(VitQuantError):
    code = "domain"
    exit_code = 5


class UsageError(VitQuantError):
    code = "usage"
    exit_code = 2


class DivergenceError(VitQuantError):
    code = "divergence"
    exit_code = 6


class DegenerateError(VitQuantError):
    code = "degenerate"
    exit_code = 7


class AllocationError(VitQuantError):
    code = "allocation"
    exit_code = 8


class FormatError(VitQuantError):
    code = "format"
    exit_code = 9


class AblationCheckError(VitQuantError):
    code = "ablation"
    exit_code = 10
