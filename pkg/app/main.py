import argparse
import json
import logging
import platform
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import UTC, datetime
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy
import torch

from app.checkpoint import Checkpoint
from app.config import DETERMINISTIC, LOG_LEVEL, dump_config, load_config, with_overrides
from app.inference import (
    EnsemblePredictor,
    build_ensemble,
    decode_labels,
    gaussian_weights,
    save_probmap,
    select_members,
    uniform_weights,
    write_probmap_nifti,
)
from app.metrics import evaluate_dirs, summarize, write_boxplot_csv, write_case_csv, write_summary_csv
from app.model import NetworkConfig
from app.phantom import PhantomSpec, generate_dataset
from app.postproc import postprocess
from app.runtime import DivergenceError, SegmentationError
from app.training import TrainConfig, load_dataset, train_fold
from app.volume import list_cases, load_case, preprocess, write_nifti

IO_ERROR_CODE = 1
USAGE_ERROR_CODE = 2
DIVERGENCE_ERROR_CODE = 3

PACKAGE = "modality-pairing-segmentation"
MANIFEST = "manifest.json"

log = logging.getLogger("app.main")


def header(stage: str):
    log.info(f" {stage.upper()} ".center(20, "="))


@contextmanager
def step(stage: str):
    """Run stage under a banner, turning the toolkit's errors into exit codes"""
    header(stage)
    try:
        yield
    except DivergenceError as e:
        log.error(e.message)
        sys.exit(DIVERGENCE_ERROR_CODE)
    except SegmentationError as e:
        log.error(e.message)
        sys.exit(USAGE_ERROR_CODE)
    except OSError as e:
        log.error(str(e))
        sys.exit(IO_ERROR_CODE)


def versions():
    try:
        own = metadata.version(PACKAGE)
    except metadata.PackageNotFoundError:
        own = "dev"
    return {
        PACKAGE: own,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


@dataclass
class RunManifest:
    """Everything needed to rerun a command"""

    command: str
    argv: list[str]
    inputs: list[str]
    outputs: list[str]
    seed: int | None = None
    config_paths: dict[str, str | None] = field(default_factory=dict)
    timestamp: str = field(default_factory=lambda: datetime.now(UTC).isoformat(timespec="seconds"))
    versions: dict[str, str] = field(default_factory=versions)

    def write(self, out_dir: Path):
        path = out_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def cmd_phantom(args: argparse.Namespace, argv: list[str]):
    template = PhantomSpec(dims=tuple(args.dims), tumor_count=args.tumors, noise_sigma=args.noise)
    with step("phantom"):
        case_ids = generate_dataset(args.n, args.seed, args.out, template)
        RunManifest("phantom", argv, [], [str(args.out / c) for c in case_ids], args.seed).write(args.out)


def resolve_configs(args: argparse.Namespace):
    train_config = load_config(args.train_config, TrainConfig) if args.train_config else TrainConfig()
    net_config = load_config(args.net_config, NetworkConfig) if args.net_config else NetworkConfig()
    train_config = with_overrides(
        train_config,
        fold=args.fold,
        seed=args.seed,
        epoch_max=args.epochs,
        iterations_per_epoch=args.iterations,
        patch_size=tuple(args.patch_size) if args.patch_size else None,
        batch_size=args.batch_size,
        device=args.device,
    )
    net_config = with_overrides(net_config, depth=args.depth, base_channels=args.base_channels)
    return train_config, net_config


def optional_str(path: Path | None):
    return str(path) if path else None


def cmd_train(args: argparse.Namespace, argv: list[str]):
    with step("config"):
        train_config, net_config = resolve_configs(args)
        args.out.mkdir(parents=True, exist_ok=True)
        dump_config(train_config, args.out / "train_config.json")
        dump_config(net_config, args.out / "net_config.json")
    with step("load"):
        cases = load_dataset(args.data)
    with step("train"):
        train_fold(cases, train_config, net_config, args.out, args.arch)
        RunManifest(
            "train",
            argv,
            [str(args.data)],
            [str(p) for p in sorted(args.out.iterdir())],
            train_config.seed,
            {"train_config": optional_str(args.train_config), "net_config": optional_str(args.net_config)},
        ).write(args.out)


def make_predictor(args: argparse.Namespace) -> EnsemblePredictor:
    checkpoints = [Checkpoint.load(p) for p in args.checkpoints]
    if args.top:
        checkpoints = select_members(checkpoints, args.top)
    weighting = gaussian_weights if args.gaussian else uniform_weights
    patch_size = tuple(args.patch_size) if args.patch_size else None
    return build_ensemble(checkpoints, patch_size, args.overlap, weighting)


def cmd_predict(args: argparse.Namespace, argv: list[str]):
    with step("load"):
        predictor = make_predictor(args)
        case_ids = list_cases(args.data)
    if DETERMINISTIC():
        torch.use_deterministic_algorithms(True)

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = []
    with step("predict"):
        for case_id in case_ids:
            case, bbox = preprocess(load_case(args.data, case_id))
            probs = predictor.predict(case, bbox)
            seg = decode_labels(probs)
            if args.postprocess:
                seg = postprocess(seg)
            path = args.out / f"{case_id}.nii.gz"
            write_nifti(seg, path)
            outputs.append(str(path))
            if args.save_probs:
                prob_dir = args.out / "probs"
                prob_dir.mkdir(exist_ok=True)
                save_probmap(probs, prob_dir / f"{case_id}.npz")
                write_probmap_nifti(probs, prob_dir, case_id)
            log.info("%s: %d tumor voxels", case_id, np.count_nonzero(seg.data))
        RunManifest("predict", argv, [str(args.data), *map(str, args.checkpoints)], outputs).write(args.out)


def cmd_evaluate(args: argparse.Namespace, argv: list[str]):
    report = args.report or args.pred_dir
    with step("evaluate"):
        rows = evaluate_dirs(args.pred_dir, args.ref_dir, args.penalty)
        report.mkdir(parents=True, exist_ok=True)
        outputs = [report / "cases.csv", report / "summary.csv", report / "boxplot.csv"]
        write_case_csv(rows, outputs[0])
        write_summary_csv(summarize(rows), outputs[1])
        write_boxplot_csv(rows, outputs[2])
        inputs = [str(args.pred_dir), str(args.ref_dir)]
        RunManifest("evaluate", argv, inputs, [str(p) for p in outputs]).write(report)


def triple(name: str):
    return {"nargs": 3, "type": int, "metavar": ("D", "H", "W"), "help": name}


def build_parser():
    parser = argparse.ArgumentParser(prog="mpseg", description="Modality-pairing brain tumor segmentation")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("phantom", help="Generate synthetic four-modality cases")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dims", default=[48, 48, 48], **triple("Volume dims"))
    p.add_argument("--tumors", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(run=cmd_phantom)

    p = commands.add_parser("train", help="Train one cross-validation fold")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--arch", choices=("dual", "vanilla"), default="dual")
    p.add_argument("--train-config", type=Path)
    p.add_argument("--net-config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="Iterations per epoch")
    p.add_argument("--patch-size", **triple("Training patch size"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--device")
    p.set_defaults(run=cmd_train)

    p = commands.add_parser("predict", help="Segment every case with an ensemble of checkpoints")
    p.add_argument("checkpoints", type=Path, nargs="+")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--postprocess", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--patch-size", **triple("Tile size, defaults to the training patch size"))
    p.add_argument("--top", type=int, help="Keep the best N checkpoints per architecture")
    p.add_argument("--gaussian", action="store_true", help="Weight tiles toward their centers")
    p.add_argument("--save-probs", action="store_true")
    p.set_defaults(run=cmd_predict)

    p = commands.add_parser("evaluate", help="Score predictions against reference segmentations")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("ref_dir", type=Path)
    p.add_argument("--report", type=Path)
    p.add_argument("--penalty", type=float, help="HD95 when exactly one side is empty")
    p.set_defaults(run=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None):
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(
        level=LOG_LEVEL(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True
    )
    args = build_parser().parse_args(argv)
    args.run(args, argv)


if __name__ == "__main__":  # pragma: no cover
    main()
