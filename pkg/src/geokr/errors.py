"""Exception hierarchy shared by every pipeline stage."""


class GeoKRError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


# raster container
class RasterError(GeoKRError):
    pass


class MalformedHeader(RasterError):
    pass


class SizeMismatch(RasterError):
    pass


class UnsupportedSampleType(RasterError):
    pass


# supervision extraction
class NoHostingArea(GeoKRError):
    pass


class WindowOutOfBounds(GeoKRError):
    pass


class NotLandCover(GeoKRError):
    pass


class NoSupportedClasses(GeoKRError):
    pass


# ingest
class SceneTooSmall(GeoKRError):
    pass


class WrongBandCount(GeoKRError):
    pass


# networks and training
class ShapeMismatch(GeoKRError):
    pass


class GraphNotEvaluated(GeoKRError):
    pass


class MissingGradients(GeoKRError):
    pass


class ArchitectureMismatch(GeoKRError):
    pass


class NonSquareTile(GeoKRError):
    pass


class SourceUnreadable(GeoKRError):
    pass


class NonFiniteLoss(GeoKRError):
    pass


# analysis
class DivisionByZeroProportion(GeoKRError):
    pass


class KeyMismatch(GeoKRError):
    pass
