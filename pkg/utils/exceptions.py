# utils/exceptions.py
from pathlib import Path
from typing import Optional, Union


class MFTrackError(Exception):
    """Base class for every error raised by the tracking framework."""


class ConfigError(MFTrackError):
    def __init__(self, errors: Union[str, list[str]]):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class DatasetError(MFTrackError):
    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(f"{message}{location}")


class CheckpointError(DatasetError):
    """A checkpoint archive or manifest that cannot be turned back into a network."""


class GeometryError(MFTrackError, ValueError):
    pass


class TrainingError(MFTrackError):
    pass


class ProtocolError(MFTrackError):
    pass
