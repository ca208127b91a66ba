"""Exception hierarchy. Every error raised by the library derives from SemsplatError."""


class SemsplatError(Exception):
    """Base class for library errors."""


class DimensionMismatchError(SemsplatError, ValueError):
    pass


class NoVisibleGeometryError(SemsplatError, ValueError):
    def __init__(self, msg="no visible geometry"):
        super().__init__(msg)


class DegenerateQuaternionError(SemsplatError, ValueError):
    def __init__(self, msg="degenerate quaternion"):
        super().__init__(msg)


class DegenerateAlignmentError(SemsplatError, ValueError):
    def __init__(self, msg="degenerate alignment"):
        super().__init__(msg)


class FeaturesNotCompressedError(SemsplatError, ValueError):
    def __init__(self, msg="features not compressed"):
        super().__init__(msg)


class NonFiniteLossError(SemsplatError, FloatingPointError):
    """Raised by the fitting loop when a loss or gradient stops being finite."""


class FormatError(SemsplatError, ValueError):
    """Malformed file. Carries the offending path and byte offset when known."""

    def __init__(self, path, msg, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{where}: {msg}")
