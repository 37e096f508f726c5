"""Exception hierarchy shared by every dgpic module.

Each family carries the exit code the CLI returns for it.
"""


class DGPICError(Exception):
    exit_code = 1


# ----- usage (2) -----
class UsageError(DGPICError):
    exit_code = 2


class ConfigError(DGPICError):
    exit_code = 2


# ----- data / artifact (3) -----
class DataError(DGPICError):
    exit_code = 3


class InvalidInputError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class ShapeError(DataError):
    pass


class ContractError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class VersionError(DataError):
    pass


class ResolutionError(DataError):
    def __init__(self, message, missing_id=None):
        super().__init__(message)
        self.missing_id = missing_id


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class StalenessError(DataError):
    pass


# ----- numeric (4) -----
class NumericError(DGPICError):
    exit_code = 4

    def __init__(self, message, block_index=None):
        super().__init__(message)
        self.block_index = block_index
