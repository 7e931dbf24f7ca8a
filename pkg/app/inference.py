"""Whole-volume prediction: sliding-window tiling, ensemble averaging and label decoding."""

import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
import torch

from app import nifti
from app.checkpoint import Checkpoint
from app.model import BranchInput, SegmentationNet, device_of
from app.runtime import ConfigError, EnsembleError, ShapeError
from app.volume import BBox, Dims, MultiModalCase, SegVolume, Spacing, Volume, write_nifti

log = logging.getLogger(__name__)

NUM_CLASSES = 4
CLASS_LABELS = np.array([0, 1, 2, 4], dtype=np.uint8)
NORMALIZATION_TOLERANCE = 1e-5

type Weighting = Callable[[Dims], npt.NDArray[np.float64]]


@dataclass(frozen=True, eq=False)
class ProbMap:
    data: npt.NDArray[np.float32]
    """classes x d x h x w, summing to 1 over classes"""
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Probability map must be 4-d, got shape {self.data.shape}")

    @property
    def dims(self) -> Dims:
        _, d, h, w = self.data.shape
        return d, h, w

    @property
    def num_classes(self):
        return self.data.shape[0]

    def is_normalized(self, tolerance: float = NORMALIZATION_TOLERANCE):
        sums = self.data.sum(axis=0, dtype=np.float64)
        return bool((self.data >= 0).all() and np.abs(sums - 1).max() <= tolerance)


def uniform_weights(patch_size: Dims) -> npt.NDArray[np.float64]:
    return np.ones(patch_size, dtype=np.float64)


def gaussian_weights(patch_size: Dims, sigma_scale: float = 1 / 8) -> npt.NDArray[np.float64]:
    """Peaks at the tile center, so voxels near tile borders count less"""
    axes = np.ogrid[tuple(slice(0, p) for p in patch_size)]
    sigmas = [p * sigma_scale for p in patch_size]
    exponent = sum(((a - (p - 1) / 2) / s) ** 2 for a, p, s in zip(axes, patch_size, sigmas, strict=True))
    w = np.exp(-0.5 * exponent)
    w /= w.max()
    return np.maximum(w, w[w > 0].min())


def tile_starts(size: int, patch: int, stride: int):
    """0, stride, 2 * stride, ... and one tile flush with the far edge"""
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_window_predict(
    network: SegmentationNet,
    case: MultiModalCase,
    patch_size: Dims,
    overlap: float = 0.5,
    bbox: BBox | None = None,
    weighting: Weighting = uniform_weights,
) -> ProbMap:
    """Softmax probabilities of a preprocessed case, averaged over overlapping tiles.

    With a bbox, the result is un-cropped to bbox.full with background probability 1 outside it.
    """
    if not 0 <= overlap < 1:
        raise ConfigError(f"Overlap must be in [0, 1), got {overlap}")
    dims = case.dims
    padded = tuple(max(d, p) for d, p in zip(dims, patch_size, strict=True))
    image = np.pad(case.stacked, [(0, 0)] + [(0, p - d) for d, p in zip(dims, padded, strict=True)])
    strides = [max(1, int(p * (1 - overlap))) for p in patch_size]
    weights = weighting(patch_size)

    acc = np.zeros((NUM_CLASSES, *padded), dtype=np.float64)
    visits = np.zeros(padded, dtype=np.float64)
    device = device_of(network)
    network.eval()
    with torch.no_grad():
        grid = (tile_starts(n, p, s) for n, p, s in zip(padded, patch_size, strides, strict=True))
        for start in itertools.product(*grid):
            tile = tuple(slice(s, s + p) for s, p in zip(start, patch_size, strict=True))
            x = torch.from_numpy(image[(slice(None), *tile)][None]).to(device)
            logits = network(BranchInput.from_stack(x)).logits
            probs = torch.softmax(logits.double(), dim=1)[0].cpu().numpy()
            if probs.shape[0] != NUM_CLASSES:
                raise EnsembleError(f"Network predicts {probs.shape[0]} classes, expected {NUM_CLASSES}")
            acc[(slice(None), *tile)] += probs * weights
            visits[tile] += weights

    probs = (acc / visits)[(slice(None), *(slice(0, d) for d in dims))]
    if bbox:
        inside = bbox.pad(np.ones(dims, dtype=bool), fill=False)
        probs = bbox.pad(probs)
        probs[0][~inside] = 1.0
    result = ProbMap(probs.astype(np.float32), case.spacing)
    if not result.is_normalized():
        raise RuntimeError("Impossible state: tile average isn't normalized")  # pragma: no cover
    return result


def ensemble_average(maps: Sequence[ProbMap]) -> ProbMap:
    if not maps:
        raise EnsembleError("Can't average an empty ensemble")
    shapes = {m.data.shape for m in maps}
    if len(shapes) != 1:
        raise EnsembleError(f"Probability maps differ in shape: {sorted(shapes)}")
    mean = np.mean(np.stack([m.data for m in maps]), axis=0, dtype=np.float64)
    return ProbMap(mean.astype(np.float32), maps[0].spacing)


def decode_labels(p: ProbMap) -> SegVolume:
    """argmax over classes; ties go to the lower class index"""
    return SegVolume(CLASS_LABELS[np.argmax(p.data, axis=0)], p.spacing)


@dataclass
class EnsemblePredictor:
    members: list[SegmentationNet]
    patch_size: Dims
    overlap: float = 0.5
    weighting: Weighting = field(default=uniform_weights)

    def member_maps(self, case: MultiModalCase, bbox: BBox | None = None):
        return [
            sliding_window_predict(net, case, self.patch_size, self.overlap, bbox, self.weighting)
            for net in self.members
        ]

    def predict(self, case: MultiModalCase, bbox: BBox | None = None) -> ProbMap:
        return ensemble_average(self.member_maps(case, bbox))


def build_ensemble(
    checkpoints: Sequence[Checkpoint],
    patch_size: Dims | None = None,
    overlap: float = 0.5,
    weighting: Weighting = uniform_weights,
) -> EnsemblePredictor:
    """Any mix of architectures, as long as they share the label space"""
    if not checkpoints:
        raise EnsembleError("An ensemble needs at least one checkpoint")
    if bad := [n for c in checkpoints if (n := c.network_config.num_classes) != NUM_CLASSES]:
        raise EnsembleError(f"Members predict {bad} classes, expected {NUM_CLASSES}")

    patch_size = patch_size or checkpoints[0].patch_size
    if patch_size is None:
        raise ConfigError("No patch size given and the checkpoint doesn't record one")
    log.info("ensemble of %d: %s", len(checkpoints), ", ".join(c.arch for c in checkpoints))
    return EnsemblePredictor([c.build() for c in checkpoints], patch_size, overlap, weighting)


def select_members(checkpoints: Sequence[Checkpoint], top: int = 3) -> list[Checkpoint]:
    """The top checkpoints per architecture by validation Dice; unvalidated ones rank last"""
    chosen: list[Checkpoint] = []
    for arch in dict.fromkeys(c.arch for c in checkpoints):
        same = [c for c in checkpoints if c.arch == arch]
        same.sort(key=lambda c: -c.val_dice if c.val_dice is not None else float("inf"))
        chosen.extend(same[:top])
    return chosen


def save_probmap(p: ProbMap, path: Path | str):
    nifti.write_raw(p.data, p.spacing, path)


def load_probmap(path: Path | str) -> ProbMap:
    data, spacing = nifti.read_raw(path)
    return ProbMap(data.astype(np.float32), (spacing[0], spacing[1], spacing[2]))


def write_probmap_nifti(p: ProbMap, out_dir: Path | str, case_id: str):
    """One float32 NIfTI per class, named <case_id>_prob<label>.nii.gz"""
    out_dir = Path(out_dir)
    paths = []
    for index, label in enumerate(CLASS_LABELS):
        path = out_dir / f"{case_id}_prob{label}.nii.gz"
        write_nifti(Volume(np.ascontiguousarray(p.data[index]), p.spacing), path)
        paths.append(path)
    return paths
