"""Exception hierarchy shared by all modules."""


class EvstabError(Exception):
    """Base class for every error raised by this package."""


class NonUnitQuaternion(EvstabError, ValueError):
    pass


class ParseError(EvstabError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NonMonotonicTimestamps(ParseError):
    pass


class InvalidCalibration(EvstabError, ValueError):
    pass


class UnsupportedFormat(EvstabError, ValueError):
    pass


class TruncatedFile(EvstabError, ValueError):
    pass


class IoError(EvstabError, OSError):
    pass


class InsufficientSamples(EvstabError, ValueError):
    pass


class OutOfRange(EvstabError, ValueError):
    pass


class DivergentUndistortion(EvstabError, ValueError):
    pass


class DegenerateWindow(EvstabError, ValueError):
    pass


class NoTexture(EvstabError, ValueError):
    pass


class InsufficientFlow(EvstabError, ValueError):
    pass


class DegenerateGeometry(EvstabError, ValueError):
    pass


class LengthMismatch(EvstabError, ValueError):
    pass


class NoValidTracks(EvstabError, ValueError):
    pass


class PlaneBehindCamera(EvstabError, ValueError):
    pass


class PointNotOnPlane(EvstabError, ValueError):
    pass


class InputMismatch(EvstabError, ValueError):
    pass


class ConfigError(EvstabError, ValueError):
    pass
