# maskrouter/utils/errors.py
"""Exception hierarchy shared by the library, the CLI and the HTTP app.

Every error carries the process exit code the CLI reports for it:
2 usage/config, 3 file format or integrity, 4 contract violation.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_CONTRACT = 4


class MaskRouterError(Exception):
    """Base class for every error raised by maskrouter"""

    exit_code = EXIT_CONTRACT


# Usage / configuration

class ConfigError(MaskRouterError):
    exit_code = EXIT_USAGE


class UsageError(ConfigError):
    """Bad command-line usage or a missing input file"""


# File format / integrity

class FormatError(MaskRouterError):
    exit_code = EXIT_FORMAT


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class PopcountError(FormatError):
    pass


class PadBitsError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


# Contract violations

class ContractError(MaskRouterError):
    exit_code = EXIT_CONTRACT


class DimensionError(ContractError, ValueError):
    pass


class MaskError(ContractError):
    pass


class BudgetError(ContractError):
    pass


class LabelIndexError(ContractError, IndexError):
    pass


class RegistryError(ContractError):
    pass


class UnknownTaskError(ContractError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else "unknown task"


class UndefinedCorrelationError(ContractError):
    pass


class InsufficientPairsError(ContractError):
    pass
