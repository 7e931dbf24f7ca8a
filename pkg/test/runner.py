import itertools
import math
import os
import tempfile
from collections import deque
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import override

import numpy as np
import torch
from torch import nn

from app.model import BranchInput, ForwardOutput, NetworkConfig
from app.training import TrainConfig
from app.volume import MODALITIES, MultiModalCase, SegVolume, Volume

LABELS = np.array([0, 1, 2, 4], dtype=np.uint8)


def random_labels(dims=(8, 8, 8), seed=0, p=(0.4, 0.2, 0.2, 0.2)):
    rng = np.random.default_rng(seed)
    return SegVolume(rng.choice(LABELS, size=dims, p=p).astype(np.uint8))


def tiny_case(case_id="case", dims=(8, 8, 8), seed=0, labels=True, spacing=(1.0, 1.0, 1.0)):
    """Random nonzero intensities, so cropping keeps the whole grid"""
    rng = np.random.default_rng(seed)
    modalities = {m: Volume(rng.uniform(0.5, 1.5, size=dims).astype(np.float32), spacing) for m in MODALITIES}
    seg = SegVolume(random_labels(dims, seed).data, spacing) if labels else None
    return MultiModalCase(case_id, modalities, seg)


def tiny_net_config(**changes):
    values = {"depth": 3, "base_channels": 2, "deep_supervision_levels": 1} | changes
    return NetworkConfig(**values)


def tiny_train_config(**changes):
    values = {
        "patch_size": (8, 8, 8),
        "batch_size": 2,
        "epoch_max": 2,
        "warmup_epochs": 1,
        "lr_step": 0.01,
        "lr_max": 0.01,
        "iterations_per_epoch": 2,
        "num_folds": 2,
        "device": "cpu",
    } | changes
    return TrainConfig(**values)


@contextmanager
def temp_dir() -> Iterator[Path]:
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@contextmanager
def env_var(name: str, value: str | None):
    old = os.environ.get(name)
    if value is None:
        os.environ.pop(name, None)
    else:
        os.environ[name] = value
    try:
        yield
    finally:
        if old is None:
            os.environ.pop(name, None)
        else:
            os.environ[name] = old


class StubNet(nn.Module):
    """Stands in for a SegmentationNet: logits from a callback of (call index, input)"""

    arch = "stub"

    def __init__(self, logits_fn):
        super().__init__()
        self.logits_fn = logits_fn
        self.calls = 0

    @override
    def forward(self, x: BranchInput) -> ForwardOutput:
        logits = self.logits_fn(self.calls, x)
        self.calls += 1
        return ForwardOutput(logits, [], x.a, x.b)


def constant_logits(values):
    """Same class scores at every voxel"""

    def fn(_calls, x: BranchInput):
        n, spatial = x.a.shape[0], x.a.shape[2:]
        return torch.tensor(values, dtype=torch.float32).view(1, -1, 1, 1, 1).expand(n, -1, *spatial).clone()

    return fn


def flood_fill_sizes(mask: np.ndarray) -> list[int]:
    """Component sizes under 26-connectivity by breadth-first search, sorted"""
    seen = np.zeros(mask.shape, dtype=bool)
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    sizes = []
    for start in zip(*np.nonzero(mask), strict=True):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        size = 0
        while queue:
            voxel = queue.popleft()
            size += 1
            for o in offsets:
                n = tuple(v + d for v, d in zip(voxel, o, strict=True))
                if all(0 <= c < s for c, s in zip(n, mask.shape, strict=True)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        sizes.append(size)
    return sorted(sizes)


def brute_surface(mask: np.ndarray):
    """Voxels with a 6-neighbour that is background or off the grid"""
    points = []
    for voxel in zip(*np.nonzero(mask), strict=True):
        for axis, d in itertools.product(range(3), (-1, 1)):
            n = list(voxel)
            n[axis] += d
            if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                points.append(voxel)
                break
    return points


def brute_hd95(pred: np.ndarray, ref: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """All-pairs closest surface distances, pooled both ways, nearest-rank 95th percentile"""
    ps, rs = brute_surface(pred), brute_surface(ref)

    def dist(p, q):
        return math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(p, q, spacing, strict=True)))

    pooled = sorted([min(dist(p, q) for q in rs) for p in ps] + [min(dist(r, q) for q in ps) for r in rs])
    return pooled[math.ceil(0.95 * len(pooled) - 1e-9) - 1]
