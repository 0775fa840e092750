"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class AirwayQuantError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AirwayQuantError):
    pass


class GeometryMismatchError(AirwayQuantError):
    pass


class NiftiError(AirwayQuantError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDtypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class EmptyMaskError(AirwayQuantError):
    pass


class TreeDepthError(AirwayQuantError):
    """Requested tree depth drives branch radii below the allowed floor."""


class SegmentationError(AirwayQuantError):
    pass


class EmptyLungError(SegmentationError):
    pass


class SeedError(SegmentationError):
    """Seed voxel missing, out of bounds or not air-like."""


class UnboundedLeakError(SegmentationError):
    pass


class RegionCodeError(AirwayQuantError):
    pass


class CohortError(AirwayQuantError):
    pass


class StatisticsError(AirwayQuantError):
    pass


class DegenerateStatisticsError(StatisticsError):
    pass
