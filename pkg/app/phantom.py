"""Synthetic four-modality brains with nested ellipsoid tumors, so every pipeline stage can be
checked without the license-gated challenge data.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from app.runtime import PhantomError
from app.volume import Dims, Modality, MultiModalCase, SegVolume, Volume, save_case

log = logging.getLogger(__name__)

MIN_TUMOR_DIMS = 16
PLACEMENT_ATTEMPTS = 100


class Contrast(NamedTuple):
    background: float
    gray: float
    white: float
    edema: float
    necrosis: float
    enhancing: float


# T2/Flair light up the whole tumor including edema, T1ce lights up the enhancing rim,
# T1/T1ce separate gray from white matter and leave edema unenhanced.
default_contrast = {
    Modality.T1: Contrast(0.0, 0.45, 0.70, 0.50, 0.25, 0.55),
    Modality.T1CE: Contrast(0.0, 0.45, 0.70, 0.50, 0.30, 1.00),
    Modality.T2: Contrast(0.0, 0.55, 0.40, 0.90, 1.00, 0.80),
    Modality.FLAIR: Contrast(0.0, 0.45, 0.40, 0.95, 0.75, 0.85),
}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: Dims = (48, 48, 48)
    tumor_count: int = 1
    noise_sigma: float = 0.05
    tumor_radius: tuple[float, float] = (6.0, 9.0)
    """Range of the edema (outermost) semi-axis, in voxels"""
    enhancing_ratio: float = 0.7
    necrosis_ratio: float = 0.45
    contrast: dict[Modality, Contrast] = field(default_factory=lambda: dict(default_contrast))


class Grid:
    """Voxel-center coordinates shared by every ellipsoid of one phantom"""

    def __init__(self, dims: Dims):
        self.dims = dims
        self.axes = np.ogrid[: dims[0], : dims[1], : dims[2]]
        self.center = (np.asarray(dims, dtype=np.float64) - 1) / 2

    def ellipsoid(self, center: npt.NDArray[np.float64], radii: npt.NDArray[np.float64]):
        total = sum(((a - c) / r) ** 2 for a, c, r in zip(self.axes, center, radii, strict=True))
        return np.asarray(total <= 1.0)


def place_tumor(
    grid: Grid,
    brain: npt.NDArray[np.bool_],
    brain_radii: npt.NDArray[np.float64],
    rng: np.random.Generator,
    spec: PhantomSpec,
):
    radii = rng.uniform(*spec.tumor_radius) * rng.uniform(0.85, 1.15, size=3)
    low = grid.center - brain_radii + radii
    high = grid.center + brain_radii - radii
    if np.any(low > high):
        raise PhantomError(f"Tumor radii {np.round(radii, 1)} don't fit inside the brain {brain_radii}")

    for _ in range(PLACEMENT_ATTEMPTS):
        center = rng.uniform(low, high)
        if brain[grid.ellipsoid(center, radii)].all():
            return center, radii
    raise PhantomError(f"Couldn't place a tumor of radii {np.round(radii, 1)} inside the brain")


def generate_phantom(spec: PhantomSpec, case_id: str | None = None) -> MultiModalCase:
    if spec.tumor_count > 0 and min(spec.dims) < MIN_TUMOR_DIMS:
        raise PhantomError(f"Phantoms with tumors need dims >= {MIN_TUMOR_DIMS}, got {spec.dims}")
    rng = np.random.default_rng(spec.seed)
    grid = Grid(spec.dims)

    brain_radii = 0.42 * np.asarray(spec.dims, dtype=np.float64)
    brain = grid.ellipsoid(grid.center, brain_radii)
    white = grid.ellipsoid(grid.center, 0.6 * brain_radii)

    tumors = [place_tumor(grid, brain, brain_radii, rng, spec) for _ in range(spec.tumor_count)]
    labels = np.zeros(spec.dims, dtype=np.uint8)
    # All edema first, then rims, then cores: overlapping tumors stay nested
    for label, ratio in ((2, 1.0), (4, spec.enhancing_ratio), (1, spec.necrosis_ratio)):
        for center, radii in tumors:
            labels[grid.ellipsoid(center, radii * ratio)] = label

    modalities = {}
    for m, c in spec.contrast.items():
        img = np.full(spec.dims, c.background, dtype=np.float64)
        img[brain] = c.gray
        img[white] = c.white
        img[labels == 2] = c.edema
        img[labels == 4] = c.enhancing
        img[labels == 1] = c.necrosis
        if spec.noise_sigma > 0:
            img[brain] += rng.normal(0.0, spec.noise_sigma, size=int(brain.sum()))
        modalities[m] = Volume(img.astype(np.float32))

    case_id = case_id or f"phantom_{spec.seed:04d}"
    log.debug("generated %s with %d tumor voxels", case_id, np.count_nonzero(labels))
    return MultiModalCase(case_id, modalities, SegVolume(labels))


def generate_dataset(n: int, seed: int, out_dir: Path | str, template: PhantomSpec | None = None):
    if n < 1:
        raise PhantomError(f"Need at least one case, got n={n}")
    template = template or PhantomSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    case_ids = []
    for i in range(n):
        case = generate_phantom(replace(template, seed=seed + i), case_id=f"case_{i:03d}")
        save_case(case, out_dir)
        case_ids.append(case.case_id)
    log.info("wrote %d phantom cases to %s", n, out_dir)
    return case_ids
