"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` and the CLI exit
status it maps to.
"""


class AreaSerError(Exception):
    code = "ERROR"
    exit_status = 2


class DimensionError(AreaSerError, ValueError):
    code = "DIMENSION"
    exit_status = 2


class ConfigurationError(AreaSerError, ValueError):
    code = "CONFIG"
    exit_status = 1


class InputError(AreaSerError, ValueError):
    code = "DATA"
    exit_status = 2


class NumericalError(AreaSerError, ArithmeticError):
    code = "NUMERICAL"
    exit_status = 3


class ContractError(AreaSerError, RuntimeError):
    code = "CONTRACT"
    exit_status = 3
