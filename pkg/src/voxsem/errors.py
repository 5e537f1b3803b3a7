"""Exception types shared across voxsem modules."""


class VoxsemError(Exception):
    """Base class for all voxsem errors."""


class ShapeError(VoxsemError, ValueError):
    pass


class FormatError(VoxsemError, ValueError):
    """Malformed VGRID file. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DomainError(VoxsemError, ValueError):
    pass


class InvalidClassError(VoxsemError, ValueError):
    pass


class EmptySceneError(VoxsemError):
    pass


class EmptyEvalError(VoxsemError):
    pass


class GenerationError(VoxsemError):
    pass


class StateError(VoxsemError):
    pass


class DivergenceError(VoxsemError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(VoxsemError, ValueError):
    pass
