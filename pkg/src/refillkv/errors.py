"""Exception hierarchy. Every error raised by the package derives from RefillKVError."""


class RefillKVError(Exception):
    pass


class ShapeError(RefillKVError, ValueError):
    pass


class ConfigError(RefillKVError, ValueError):
    pass


class PreconditionError(RefillKVError, ValueError):
    pass


class StructureError(RefillKVError, ValueError):
    """Malformed L1/L2 kind pattern; ``index`` is the first offending entry."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (at entry {index})")
        self.index = index


class SelectionError(RefillKVError, IndexError):
    pass


class FormatError(RefillKVError, ValueError):
    """Bad cache/checkpoint bytes; ``offset`` is where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass


class WindowOverflowError(RefillKVError):
    """Retained L1 entries alone no longer fit in the working window."""


class CapacityError(RefillKVError):
    """Live KV entries exceed a configured hard cap (modelled out-of-memory)."""


class TrainingError(RefillKVError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
