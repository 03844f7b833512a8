"""Exception types raised across the package.

Each error carries a short machine-readable ``code`` (its class name) that the
command-line front end prints on failure.
"""


class CGFError(Exception):
    """Base class for all package errors."""

    @property
    def code(self):
        return type(self).__name__


class EmptyCloud(CGFError, ValueError):
    pass


class InvalidRadius(CGFError, ValueError):
    pass


class ParseError(CGFError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateNeighborhood(CGFError, ValueError):
    pass


class DegenerateCloud(CGFError, ValueError):
    pass


class ShapeError(CGFError, ValueError):
    pass


class NoTriplets(CGFError, ValueError):
    pass


class ModelFormatError(CGFError, ValueError):
    pass


class NoCorrespondences(CGFError, ValueError):
    pass


class EmptyTarget(CGFError, ValueError):
    pass


class NoRetainedMatches(CGFError, ValueError):
    pass


class InsufficientSamples(CGFError, ValueError):
    pass


class DegenerateFit(CGFError, ValueError):
    pass


class NoConsensus(CGFError, ValueError):
    pass


class NoGroundTruth(CGFError, ValueError):
    pass


class PairNotFound(CGFError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(CGFError, ValueError):
    pass
