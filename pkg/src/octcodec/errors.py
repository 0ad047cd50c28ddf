"""Exception hierarchy shared by all codec stages."""


class CodecError(Exception):
    """Base class for every error raised by this package."""


class DataError(CodecError):
    """Bad user data: unreadable files, invalid clouds, unsupported formats."""


class PlyError(DataError):
    pass


class MalformedHeaderError(PlyError):
    pass


class UnsupportedFormatError(PlyError):
    pass


class EmptyCloudError(DataError):
    pass


class OutOfBoundsError(DataError):
    def __init__(self, index, point):
        super().__init__(f"point {index} {tuple(point)} lies outside the bounding box")
        self.index = index
        self.point = point


class CorruptionError(CodecError):
    """Structural inconsistency detected in an octree or a decoded stream."""


class BitstreamError(DataError):
    """Header problems: bad magic, version or model checksum mismatch."""


class SourceExhaustedError(CorruptionError):
    pass


class ModelCorruptionError(CodecError):
    """Non-finite parameters or logits, or a damaged model file."""


class ConfigMismatchError(CodecError):
    pass


class GuardError(DataError):
    """A desk-scale guard (e.g. layer size for fully autoregressive mode) was violated."""


class TrainingError(CodecError):
    pass
