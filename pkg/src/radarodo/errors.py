"""Exception hierarchy shared by every stage of the odometry pipeline."""

from __future__ import annotations


class RadarOdoError(Exception):
    """Base class for all library errors."""


class GimbalLock(RadarOdoError):
    pass


class OutOfRange(RadarOdoError):
    pass


class ParseError(RadarOdoError):
    def __init__(self, line: int, reason: str, path: str | None = None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {reason}")


class EmptyStream(RadarOdoError):
    pass


class DegenerateScan(RadarOdoError):
    pass


class RankDeficient(RadarOdoError):
    pass


class DegenerateDirection(RadarOdoError):
    pass


class NoConsensus(RadarOdoError):
    pass


class TooFewPoints(RadarOdoError):
    pass


class NoCorrespondences(RadarOdoError):
    pass


class SolverDiverged(RadarOdoError):
    pass


class BadSpec(RadarOdoError):
    pass


class NoOverlap(RadarOdoError):
    pass


class Degenerate(RadarOdoError):
    pass


class TooShort(RadarOdoError):
    pass


class ConfigError(RadarOdoError):
    pass
