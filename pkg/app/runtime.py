from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover
    from app.volume import Modality


class SegmentationError(Exception):
    """Base of everything the toolkit raises on purpose"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class VolumeError(SegmentationError):
    pass


class LabelAlphabetError(VolumeError):
    def __init__(self, values: list[float]):
        super().__init__(f"Label values {values} outside the alphabet {{0, 1, 2, 4}}")
        self.values = values


class MissingModalityError(VolumeError):
    def __init__(self, modality: "Modality", case_dir: Path):
        super().__init__(f"Missing modality {modality} in {case_dir}")
        self.modality = modality


class NiftiError(VolumeError):
    def __init__(self, path: Path | str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    def __init__(self, path: Path | str, code: int):
        super().__init__(path, f"Unsupported datatype code {code}")
        self.code = code


class TruncatedPayloadError(NiftiError):
    pass


class PhantomError(SegmentationError):
    pass


class ConfigError(SegmentationError):
    pass


class ShapeError(SegmentationError):
    pass


class DivergenceError(SegmentationError):
    def __init__(self, epoch: int, iteration: int, losses: dict[str, float]):
        terms = ", ".join(f"{k}={v:.4g}" for k, v in losses.items())
        super().__init__(f"Loss diverged at epoch {epoch} iteration {iteration}: {terms}")
        self.epoch = epoch
        self.iteration = iteration
        self.losses = losses


class EnsembleError(SegmentationError):
    pass


class EvaluationError(SegmentationError):
    def __init__(self, case_id: str, message: str):
        super().__init__(f"{case_id}: {message}")
        self.case_id = case_id
