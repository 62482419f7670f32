"""Exception hierarchy shared by every subsystem.

Each class carries a short ``category`` string; the CLI prints it so that
failures can be parsed by scripts.
"""


class SFlowError(Exception):
    category = "error"


class ContractError(SFlowError, ValueError):
    category = "contract"


class DimensionError(SFlowError, ValueError):
    category = "dimension"


class NumericError(SFlowError, ArithmeticError):
    category = "numeric"


class VocabularyError(SFlowError, KeyError):
    category = "vocabulary"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(SFlowError, ValueError):
    category = "data"


class ConfigError(SFlowError, ValueError):
    category = "config"


class CheckpointError(SFlowError, ValueError):
    category = "checkpoint"
