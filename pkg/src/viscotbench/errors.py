"""Exception types shared across the toolkit."""


class ViscotBenchError(Exception):
    """Base class for all toolkit errors."""


class ImageFormatError(ViscotBenchError):
    """File is not a PNG/JPEG or cannot be decoded as one."""


class EmptyRegionError(ViscotBenchError):
    """A crop box has no overlap with the image bounds."""


class PresetError(ViscotBenchError):
    """Unknown corruption/attack kind or severity outside 1..5."""


class UndefinedMetricError(ViscotBenchError):
    """Metric has no defined value for the given inputs (e.g. PDR with zero
    clean accuracy, IoU of two degenerate boxes, entropy of a zero map)."""


class TransportError(ViscotBenchError):
    """Network-level failure after exhausting retries."""


class EndpointError(ViscotBenchError):
    """Remote service answered with an HTTP error status."""


class JudgeError(ViscotBenchError):
    """Judge verdict could not be parsed as YES/NO."""


class DatasetError(ViscotBenchError):
    """Dataset file is malformed (bad JSON line, duplicate ids, ...)."""
