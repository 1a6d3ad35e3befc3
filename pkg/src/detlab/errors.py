"""Exception taxonomy shared across the library.

ConfigurationError: a spec/config value is inconsistent (wrong shapes wired
together, unknown keys, invalid ranges). Maps to CLI exit code 1.
ContractError: a caller violated an operation precondition at runtime.
DataError: dataset content is invalid (bad labels, malformed records).
ParseError: an external file could not be parsed.
"""


class ConfigurationError(ValueError):
    pass


class ContractError(ValueError):
    pass


class DataError(ValueError):
    pass


class ParseError(ValueError):
    pass
