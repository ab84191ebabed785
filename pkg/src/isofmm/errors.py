"""Exception hierarchy shared by the library and the command line."""


class IsoFMMError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(IsoFMMError):
    exit_code = 2


class DataError(IsoFMMError):
    exit_code = 3


class NumericalError(IsoFMMError):
    exit_code = 4


class ProvenanceError(ConfigError):
    """Artifacts produced under different configs or inputs were mixed."""
