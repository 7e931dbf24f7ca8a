import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Self

import torch
from torch import Tensor

from app.config import from_dict, to_dict
from app.model import NetworkConfig, SegmentationNet, build_network
from app.runtime import ConfigError

log = logging.getLogger(__name__)

FORMAT = "mpseg-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    arch: str
    network_config: NetworkConfig
    state_dict: dict[str, Tensor]
    epoch: int
    fold: int
    fingerprint: str
    val_dice: float | None = None
    optimizer_state: dict[str, Any] | None = None
    train_config: dict[str, Any] = field(default_factory=dict)
    """The training run's TrainConfig as a dict, so inference can reuse its patch size"""

    @classmethod
    def capture(
        cls,
        net: SegmentationNet,
        epoch: int,
        fold: int,
        fingerprint: str,
        val_dice: float | None = None,
        optimizer: torch.optim.Optimizer | None = None,
        train_config: dict[str, Any] | None = None,
    ) -> Self:
        state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
        return cls(
            arch=net.arch,
            network_config=net.config,
            state_dict=state,
            epoch=epoch,
            fold=fold,
            fingerprint=fingerprint,
            val_dice=val_dice,
            optimizer_state=optimizer.state_dict() if optimizer else None,
            train_config=dict(train_config or {}),
        )

    def build(self) -> SegmentationNet:
        net = build_network(self.arch, self.network_config)
        net.load_state_dict(self.state_dict)
        return net.eval()

    @property
    def patch_size(self) -> tuple[int, int, int] | None:
        if patch := self.train_config.get("patch_size"):
            return (int(patch[0]), int(patch[1]), int(patch[2]))
        return None

    def save(self, path: Path | str):
        """Writes a temp file next to path, then renames it over path"""
        path = Path(path)
        payload = {
            "format": FORMAT,
            "version": VERSION,
            "arch": self.arch,
            "network_config": to_dict(self.network_config),
            "state_dict": self.state_dict,
            "epoch": self.epoch,
            "fold": self.fold,
            "fingerprint": self.fingerprint,
            "val_dice": self.val_dice,
            "optimizer_state": self.optimizer_state,
            "train_config": self.train_config,
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        log.debug("saved %s (epoch %d)", path, self.epoch)

    @classmethod
    def load(cls, path: Path | str) -> Self:
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError) as e:
            raise ConfigError(f"Can't read checkpoint {path}: {e}") from e
        if not isinstance(payload, dict) or payload.get("format") != FORMAT:
            raise ConfigError(f"{path} isn't a segmentation checkpoint")
        if payload["version"] != VERSION:
            raise ConfigError(f"{path} has checkpoint version {payload['version']}, expected {VERSION}")
        return cls(
            arch=payload["arch"],
            network_config=from_dict(NetworkConfig, payload["network_config"]),
            state_dict=payload["state_dict"],
            epoch=payload["epoch"],
            fold=payload["fold"],
            fingerprint=payload["fingerprint"],
            val_dice=payload["val_dice"],
            optimizer_state=payload["optimizer_state"],
            train_config=payload["train_config"],
        )
