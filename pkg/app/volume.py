import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Self

import numpy as np
import numpy.typing as npt

from app import nifti
from app.runtime import LabelAlphabetError, MissingModalityError, NiftiError, VolumeError

log = logging.getLogger(__name__)

type Spacing = tuple[float, float, float]
type Dims = tuple[int, int, int]
type Grid = npt.NDArray[Any]

LABELS = (0, 1, 2, 4)
DTYPES = (np.dtype(np.float32), np.dtype(np.uint8))


class Modality(Enum):
    T1 = "t1"
    T1CE = "t1ce"
    T2 = "t2"
    FLAIR = "flair"

    def __str__(self):
        return display_names[self]


display_names = {
    Modality.T1: "T1",
    Modality.T1CE: "T1ce",
    Modality.T2: "T2",
    Modality.FLAIR: "Flair",
}

# Stacking order for the single-branch network, and the two pairings of the dual-branch one
MODALITIES = tuple(Modality)
BRANCH_A = (Modality.FLAIR, Modality.T2)
BRANCH_B = (Modality.T1CE, Modality.T1)

SEG_SUFFIX = "seg"
EXTENSIONS = (".nii.gz", ".nii")


@dataclass(frozen=True, eq=False)
class Volume:
    data: Grid
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"Volume must be 3-d, got shape {self.data.shape}")
        if any(d <= 0 for d in self.data.shape):
            raise VolumeError(f"Volume dims must be positive, got {self.data.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise VolumeError(f"Spacing must be 3 positive values, got {self.spacing}")
        if self.data.dtype not in DTYPES:
            raise VolumeError(f"Unsupported dtype {self.data.dtype}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        d, h, w = self.data.shape
        return d, h, w

    def with_data(self, data: Grid) -> Self:
        return type(self)(data, self.spacing)


class SegVolume(Volume):
    """Volume of uint8 labels from {0, 1, 2, 4}"""

    def __post_init__(self):
        super().__post_init__()
        if self.data.dtype != np.uint8:
            raise VolumeError(f"Segmentation must be uint8, got {self.data.dtype}")
        if stray := sorted(set(np.unique(self.data).tolist()) - set(LABELS)):
            raise LabelAlphabetError(stray)


@dataclass(frozen=True, eq=False)
class MultiModalCase:
    case_id: str
    modalities: dict[Modality, Volume]
    labels: SegVolume | None = None

    def __post_init__(self):
        if missing := [m for m in MODALITIES if m not in self.modalities]:
            raise VolumeError(f"{self.case_id}: missing modalities {', '.join(map(str, missing))}")
        dims = {m: v.dims for m, v in self.modalities.items()}
        if len(set(dims.values())) != 1:
            raise VolumeError(f"{self.case_id}: modality dims differ {dims}")
        if self.labels and self.labels.dims != self.dims:
            raise VolumeError(f"{self.case_id}: labels {self.labels.dims} don't match {self.dims}")

    @property
    def spacing(self) -> Spacing:
        return self.modalities[Modality.T1].spacing

    @property
    def dims(self) -> Dims:
        return self.modalities[Modality.T1].dims

    @cached_property
    def stacked(self) -> npt.NDArray[np.float32]:
        """(4, d, h, w) in MODALITIES order"""
        return np.stack([self.modalities[m].data for m in MODALITIES]).astype(np.float32)

    def replace(self, **changes: object) -> Self:
        return replace(self, **changes)


@dataclass(frozen=True)
class BBox:
    """Box of a crop, remembering the grid it came from"""

    origin: Dims
    shape: Dims
    full: Dims

    @property
    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.shape, strict=True))

    def crop(self, grid: Grid) -> Grid:
        """Crops the last three axes"""
        return grid[(..., *self.slices)]

    def pad(self, grid: Grid, fill: float = 0) -> Grid:
        """Inverse of crop()"""
        out = np.full(grid.shape[:-3] + self.full, fill, dtype=grid.dtype)
        out[(..., *self.slices)] = grid
        return out


def read_nifti(path: Path | str) -> Volume:
    grid, spacing = nifti.decode(nifti.read_bytes(path), path)
    return Volume(grid, spacing)


def write_nifti(v: Volume, path: Path | str):
    try:
        nifti.write_bytes(nifti.encode(v.data, v.spacing), path)
    except OSError as e:
        raise NiftiError(path, f"Can't write: {e.strerror}") from e


def read_segmentation(path: Path | str) -> SegVolume:
    v = read_nifti(path)
    data = v.data
    if data.dtype != np.uint8:
        as_labels = data.astype(np.uint8)
        if not np.array_equal(as_labels, data):
            raise LabelAlphabetError(np.unique(data[as_labels != data]).tolist())
        data = as_labels
    return SegVolume(data, v.spacing)


def find_file(case_dir: Path, case_id: str, suffix: str):
    for ext in EXTENSIONS:
        if (path := case_dir / f"{case_id}_{suffix}{ext}").exists():
            return path
    return None


def load_case(data_dir: Path | str, case_id: str) -> MultiModalCase:
    case_dir = Path(data_dir) / case_id
    modalities = {}
    for m in MODALITIES:
        if not (path := find_file(case_dir, case_id, m.value)):
            raise MissingModalityError(m, case_dir)
        modalities[m] = read_nifti(path)

    labels = None
    if path := find_file(case_dir, case_id, SEG_SUFFIX):
        labels = read_segmentation(path)
    log.debug("loaded %s %s labels=%s", case_id, modalities[Modality.T1].dims, labels is not None)
    return MultiModalCase(case_id, modalities, labels)


def save_case(case: MultiModalCase, data_dir: Path | str, ext: str = ".nii.gz"):
    case_dir = Path(data_dir) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    for m, v in case.modalities.items():
        write_nifti(v, case_dir / f"{case.case_id}_{m.value}{ext}")
    if case.labels:
        write_nifti(case.labels, case_dir / f"{case.case_id}_{SEG_SUFFIX}{ext}")
    return case_dir


def list_cases(data_dir: Path | str) -> list[str]:
    return sorted(p.name for p in Path(data_dir).iterdir() if p.is_dir())


def crop_to_brain(case: MultiModalCase) -> tuple[MultiModalCase, BBox]:
    nonzero = np.any(case.stacked != 0, axis=0)
    if not nonzero.any():
        raise VolumeError(f"{case.case_id}: every modality is all zero")
    coords = np.nonzero(nonzero)
    lo = (int(coords[0].min()), int(coords[1].min()), int(coords[2].min()))
    hi = (int(coords[0].max()) + 1, int(coords[1].max()) + 1, int(coords[2].max()) + 1)
    bbox = BBox(lo, (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]), case.dims)

    modalities = {m: v.with_data(bbox.crop(v.data).copy()) for m, v in case.modalities.items()}
    labels = case.labels.with_data(bbox.crop(case.labels.data).copy()) if case.labels else None
    return case.replace(modalities=modalities, labels=labels), bbox


def zscore(grid: Grid) -> npt.NDArray[np.float32]:
    """z-score over the nonzero voxels, zero elsewhere.
    Mask voxels that land exactly on the mean become the smallest positive float32, so the mask
    survives a second pass.
    """
    x = grid.astype(np.float64)
    out = np.zeros_like(x)
    mask = x != 0
    if mask.any():
        values = x[mask]
        std = values.std()
        if std > 0:
            out[mask] = (values - values.mean()) / std
    z = out.astype(np.float32)
    if out.any():
        z[mask & (z == 0)] = np.finfo(np.float32).tiny
    return z


def normalize_modalities(case: MultiModalCase) -> MultiModalCase:
    modalities = {m: v.with_data(zscore(v.data)) for m, v in case.modalities.items()}
    return case.replace(modalities=modalities)


def preprocess(case: MultiModalCase) -> tuple[MultiModalCase, BBox]:
    cropped, bbox = crop_to_brain(case)
    return normalize_modalities(cropped), bbox


def as_factors(factor: int | tuple[int, ...]) -> Dims:
    f = (factor,) * 3 if isinstance(factor, int) else tuple(factor)
    if len(f) != 3 or any(x < 1 or x & (x - 1) for x in f):
        raise VolumeError(f"Downsampling factor must be a power of two per axis, got {factor}")
    return f[0], f[1], f[2]


def corner_downsample[G: Any](grid: G, factor: int | tuple[int, ...]) -> G:
    """Nearest-neighbour over the last three axes, keeping each cell's first corner.
    Works for numpy arrays and torch tensors alike.
    """
    f = as_factors(factor)
    spatial = tuple(grid.shape[-3:])
    if any(d % x for d, x in zip(spatial, f, strict=True)):
        raise VolumeError(f"Dims {spatial} aren't divisible by {f}")
    return grid[..., :: f[0], :: f[1], :: f[2]]


def downsample_labels(seg: SegVolume, factor: int | tuple[int, ...]) -> SegVolume:
    f = as_factors(factor)
    spacing = (seg.spacing[0] * f[0], seg.spacing[1] * f[1], seg.spacing[2] * f[2])
    return SegVolume(np.ascontiguousarray(corner_downsample(seg.data, f)), spacing)
