import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import torch

from app.checkpoint import Checkpoint
from app.config import DETERMINISTIC, fingerprint, to_dict
from app.inference import decode_labels, sliding_window_predict
from app.losses import LossWeights, compute_losses, deep_supervision_loss
from app.metrics import Region, dice, region_masks
from app.model import (
    BranchInput,
    NetworkConfig,
    SegmentationNet,
    build_network,
    count_parameters,
    resolve_device,
)
from app.runtime import ConfigError, DivergenceError
from app.volume import BRANCH_A, BRANCH_B, MODALITIES, Dims, MultiModalCase, list_cases, load_case, preprocess

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iteration", "lr", "loss_total", "loss_dice", "loss_ce", "loss_mp")
BEST = "best.pt"
FINAL = "final.pt"
TRAIN_LOG = "train_log.csv"


@dataclass(frozen=True)
class TrainConfig:
    patch_size: Dims = (128, 128, 128)
    batch_size: int = 2
    epoch_max: int = 1000
    warmup_epochs: int = 20
    lr_step: float = 0.0005
    """The first epoch's rate and the per-epoch warmup increment"""
    lr_max: float = 0.01
    poly_exponent: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    iterations_per_epoch: int = 250
    seed: int = 0
    fold: int = 0
    num_folds: int = 5
    foreground_fraction: float = 2 / 3
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    lambda_mp: float = 0.5
    overlap: float = 0.5
    validate_every: int = 1
    device: str = "auto"

    def validate(self):
        if any(p < 1 for p in self.patch_size):
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}")
        for name in ("batch_size", "epoch_max", "iterations_per_epoch", "num_folds", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.warmup_epochs < self.epoch_max:
            raise ConfigError(f"warmup_epochs must be in [0, epoch_max), got {self.warmup_epochs}")
        if self.warmup_epochs and not math.isclose(self.warmup_epochs * self.lr_step, self.lr_max):
            raise ConfigError(
                f"Warmup of {self.warmup_epochs} epochs by {self.lr_step} doesn't reach lr_max {self.lr_max}"
            )
        if not 0 <= self.fold < self.num_folds:
            raise ConfigError(f"fold must be in [0, {self.num_folds}), got {self.fold}")
        if not 0 <= self.foreground_fraction <= 1:
            raise ConfigError(f"foreground_fraction must be in [0, 1], got {self.foreground_fraction}")
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if min(self.lambda_dice, self.lambda_ce, self.lambda_mp, self.weight_decay, self.momentum) < 0:
            raise ConfigError("Loss weights, weight_decay and momentum must be nonnegative")

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_dice, self.lambda_ce, self.lambda_mp)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warmup by lr_step per epoch up to lr_max, then poly decay from lr_max"""
    if not 0 <= epoch < config.epoch_max:
        raise ConfigError(f"Epoch {epoch} out of range [0, {config.epoch_max})")
    if epoch < config.warmup_epochs:
        return config.lr_step * (epoch + 1)
    progress = (epoch - config.warmup_epochs) / (config.epoch_max - config.warmup_epochs)
    return config.lr_max * (1 - progress) ** config.poly_exponent


class Fold(NamedTuple):
    train: list[str]
    val: list[str]


def make_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[Fold]:
    if len(case_ids) < k:
        raise ConfigError(f"{len(case_ids)} cases can't make {k} folds")
    order = [case_ids[i] for i in np.random.default_rng(seed).permutation(len(case_ids))]
    parts = [list(p) for p in np.array_split(np.asarray(order, dtype=object), k)]
    return [Fold([c for j, p in enumerate(parts) if j != i for c in p], parts[i]) for i in range(k)]


branch_a_index = [MODALITIES.index(m) for m in BRANCH_A]
branch_b_index = [MODALITIES.index(m) for m in BRANCH_B]


class Patch(NamedTuple):
    a: npt.NDArray[np.float32]
    b: npt.NDArray[np.float32]
    labels: npt.NDArray[np.uint8]


def sample_patch(
    case: MultiModalCase,
    patch_size: Dims,
    rng: np.random.Generator,
    foreground_fraction: float = 2 / 3,
) -> Patch:
    """Centered on a random tumor voxel with probability foreground_fraction, else anywhere.
    Cases smaller than the patch are zero-padded at the far end.
    """
    image = case.stacked
    labels = case.labels.data if case.labels else np.zeros(case.dims, dtype=np.uint8)
    pad = [(0, max(0, p - d)) for d, p in zip(case.dims, patch_size, strict=True)]
    if any(after for _, after in pad):
        image = np.pad(image, [(0, 0), *pad])
        labels = np.pad(labels, pad)

    foreground = np.argwhere(labels > 0)
    if len(foreground) and rng.random() < foreground_fraction:
        center = foreground[rng.integers(len(foreground))]
    else:
        center = [rng.integers(d) for d in labels.shape]
    dims = labels.shape
    start = [int(np.clip(c - p // 2, 0, d - p)) for c, p, d in zip(center, patch_size, dims, strict=True)]
    box = tuple(slice(s, s + p) for s, p in zip(start, patch_size, strict=True))

    tile = image[(slice(None), *box)]
    return Patch(tile[branch_a_index], tile[branch_b_index], labels[box])


def sample_batch(
    cases: Sequence[MultiModalCase],
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[BranchInput, torch.Tensor]:
    patches = [
        sample_patch(cases[i], config.patch_size, rng, config.foreground_fraction)
        for i in rng.integers(len(cases), size=config.batch_size)
    ]
    a = torch.from_numpy(np.stack([p.a for p in patches]))
    b = torch.from_numpy(np.stack([p.b for p in patches]))
    labels = torch.from_numpy(np.stack([p.labels for p in patches]).astype(np.int64))
    return BranchInput(a, b), labels


def load_dataset(data_dir: Path | str, require_labels: bool = True) -> list[MultiModalCase]:
    """Every case under data_dir, cropped to the brain and normalized"""
    cases = []
    for case_id in list_cases(data_dir):
        case, _ = preprocess(load_case(data_dir, case_id))
        if require_labels and case.labels is None:
            raise ConfigError(f"{case_id} has no segmentation to train on")
        cases.append(case)
    log.info("loaded %d cases from %s", len(cases), data_dir)
    return cases


def validation_dice(net: SegmentationNet, cases: Sequence[MultiModalCase], config: TrainConfig) -> float:
    """Mean over cases of the mean WT/TC/ET Dice"""
    scores = []
    for case in cases:
        if case.labels is None:
            continue
        probs = sliding_window_predict(net, case, config.patch_size, config.overlap)
        pred = region_masks(decode_labels(probs))
        ref = region_masks(case.labels)
        scores.append(np.mean([dice(pred[r], ref[r]) for r in Region]))
    return float(np.mean(scores)) if scores else float("nan")


class TrainLog:
    """Append-only CSV of per-iteration losses"""

    def __init__(self, path: Path):
        self.path = path
        if not path.exists():
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, epoch: int, iteration: int, lr: float, losses: dict[str, float]):
        with open(self.path, "a", newline="") as f:
            values = [f"{losses[c]:.8g}" for c in LOG_COLUMNS[3:]]
            csv.writer(f).writerow([epoch, iteration, f"{lr:.8g}", *values])


def train_fold(
    cases: Sequence[MultiModalCase],
    train_config: TrainConfig,
    net_config: NetworkConfig,
    out_dir: Path | str,
    arch: str = "dual",
) -> Checkpoint:
    """Trains one cross-validation fold; cases must already be preprocessed.

    Writes best.pt whenever validation Dice improves, final.pt at the end, and train_log.csv.
    """
    train_config.validate()
    net_config.validate()
    if any(p % net_config.divisor for p in train_config.patch_size):
        raise ConfigError(f"patch_size {train_config.patch_size} must be divisible by {net_config.divisor}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_id = {c.case_id: c for c in cases}
    fold = make_folds(list(by_id), train_config.num_folds, train_config.seed)[train_config.fold]
    train_cases = [by_id[i] for i in fold.train]
    val_cases = [by_id[i] for i in fold.val]

    if DETERMINISTIC():
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    device = resolve_device(train_config.device)

    net = build_network(arch, net_config).to(device)
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=lr_schedule(0, train_config),
        momentum=train_config.momentum,
        nesterov=train_config.nesterov,
        weight_decay=train_config.weight_decay,
    )
    weights = train_config.loss_weights
    run_id = fingerprint(train_config, net_config, arch)
    train_log = TrainLog(out_dir / TRAIN_LOG)
    log.info("fold %d: %d train and %d val cases", train_config.fold, len(train_cases), len(val_cases))
    log.info("%s net with %d parameters on %s", arch, count_parameters(net), device)

    def snapshot(epoch: int, val_dice: float | None):
        config = to_dict(train_config)
        return Checkpoint.capture(net, epoch, train_config.fold, run_id, val_dice, optimizer, config)

    best = -math.inf
    val_dice = None
    for epoch in range(train_config.epoch_max):
        lr = lr_schedule(epoch, train_config)
        for group in optimizer.param_groups:
            group["lr"] = lr

        net.train()
        for iteration in range(train_config.iterations_per_epoch):
            x, target = sample_batch(train_cases, train_config, rng)
            x, target = x.to(device), target.to(device)
            out = net(x)
            probs = torch.softmax(out.logits, dim=1)
            terms = compute_losses(probs, target, out.features_a, out.features_b, weights)
            loss = terms.total + deep_supervision_loss(out.aux_logits, target)
            losses = terms.as_floats() | {"loss_total": loss.item()}
            if not math.isfinite(losses["loss_total"]):
                raise DivergenceError(epoch, iteration, losses)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            train_log.append(epoch, iteration, lr, losses)

        last = epoch == train_config.epoch_max - 1
        if val_cases and ((epoch + 1) % train_config.validate_every == 0 or last):
            val_dice = validation_dice(net, val_cases, train_config)
            log.info("epoch %d lr %.6f loss %.4f val dice %.4f", epoch, lr, losses["loss_total"], val_dice)
            if val_dice > best:
                best = val_dice
                snapshot(epoch, val_dice).save(out_dir / BEST)
        else:
            log.info("epoch %d lr %.6f loss %.4f", epoch, lr, losses["loss_total"])

    final = snapshot(train_config.epoch_max - 1, val_dice)
    final.save(out_dir / FINAL)
    return final
