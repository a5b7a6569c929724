"""
Command Line Interface
======================

    python -m cgcv flow ref.ppm tgt.ppm --out f.flo --png f.png
    python -m cgcv synth --spec spec.txt --out-dir D
    python -m cgcv volume ref.ppm tgt.ppm --query 3,2 --which V --out p.pgm
    python -m cgcv gradcheck --seed 1
    python -m cgcv train-toy --data D --epochs 200 --lr 1e-3 --out w.cgck
    python -m cgcv features img.ppm --which net --out-dir D
    python -m cgcv evaluate pred.flo gt.flo
    python -m cgcv ablate --data D --epochs 200 --lr 1e-3

Every command accepts ``--config FILE`` (flat ``key = value`` lines);
flags given on the command line override values from the file.

Exit status: 0 success, 1 runtime error, 2 usage error, 3 failing gradcheck.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from pydantic import ValidationError

from cgcv.config import Settings, merge_overrides, read_config_file
from cgcv.diagnostics import dump_features, dump_plane, encode_single, volume_summary, volumes_for_pair
from cgcv.encoders import ImagePair
from cgcv.errors import CGCVError, ConfigurationError
from cgcv.gradcheck import check_all
from cgcv.io_formats import (
    flow_from_array, flow_to_array, flow_to_png, read_flo, read_image, write_flo, write_pnm, write_volume,
)
from cgcv.models import FlowConfig, TrainConfig
from cgcv.network import CGCVFlowNet, load_model, save_model
from cgcv.synth import load_dataset, read_synth_spec, write_sample
from cgcv.training import aepe, f1_all, run_ablation, train_toy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_GRADCHECK_FAILED = 3

NETWORK_FLAGS = ("iterations", "gate_mode", "lift_enabled", "radius", "levels", "seed")
TRAIN_FLAGS = ("epochs", "lr", "gamma", "clip_grad_norm", "log_every")
PRESETS = {"toy": FlowConfig.toy, "full": FlowConfig, "gradcheck": FlowConfig.gradcheck}


# ============================================
# SETUP
# ============================================

def setup_logging(settings: Settings, verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, settings.log_level, logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S',
        force=True,
    )


def describe_error(error: Exception) -> str:
    """One-line diagnostic for any error caught at the command boundary"""
    if isinstance(error, ValidationError):
        first = error.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        return f"invalid {error.title} {location}: {first['msg']}"
    text = str(error).strip()
    return text.splitlines()[0] if text else type(error).__name__


def load_image_tensor(path: str) -> torch.Tensor:
    return torch.from_numpy(read_image(path))


def parse_query(text: str) -> List[int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"query must be 'i,j', got {text!r}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"query must be two integers, got {text!r}") from None


def file_values(args: argparse.Namespace) -> Dict[str, object]:
    """Config file values, restricted to known network/training keys"""
    if not args.config:
        return {}
    values = read_config_file(args.config)
    known = set(FlowConfig.model_fields) | set(TrainConfig.model_fields) | {"preset"}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"{args.config}: unknown keys {sorted(unknown)}")
    return values


def network_overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Config file then CLI flags, network keys only (no preset)"""
    cli = {name: getattr(args, name, None) for name in NETWORK_FLAGS}
    merged = merge_overrides(file_values(args), cli)
    return {k: v for k, v in merged.items() if k in FlowConfig.model_fields}


def build_flow_config(args: argparse.Namespace) -> FlowConfig:
    merged = merge_overrides(file_values(args), {"preset": getattr(args, "preset", None)})
    preset = str(merged.get("preset", "toy"))
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]().to_mapping()
    base.update(network_overrides(args))
    return FlowConfig.from_mapping(base)


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    cli = {name: getattr(args, name, None) for name in TRAIN_FLAGS}
    merged = merge_overrides(file_values(args), cli)
    return TrainConfig(**{k: v for k, v in merged.items() if k in TrainConfig.model_fields})


def model_for(args: argparse.Namespace) -> CGCVFlowNet:
    """Checkpointed network if --ckpt is given, else freshly initialized"""
    if getattr(args, "ckpt", None):
        return load_model(args.ckpt, network_overrides(args))
    return CGCVFlowNet(build_flow_config(args))


# ============================================
# COMMANDS
# ============================================

def cmd_flow(args: argparse.Namespace) -> int:
    model = model_for(args)
    pair = ImagePair(reference=load_image_tensor(args.ref), target=load_image_tensor(args.tgt))
    flow = flow_to_array(model.estimate(pair))
    write_flo(args.out, flow)
    logger.info(f"Wrote flow {flow.shape[1]}x{flow.shape[0]} to {args.out}")
    if args.png:
        flow_to_png(args.png, flow)
        logger.info(f"Wrote visualization to {args.png}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = read_synth_spec(args.spec)
    directory = write_sample(args.out_dir, spec)
    logger.info(f"Wrote synthetic pair to {directory}")
    return EXIT_OK


def cmd_volume(args: argparse.Namespace) -> int:
    model = model_for(args)
    pair = ImagePair(reference=load_image_tensor(args.ref), target=load_image_tensor(args.tgt))
    volumes = volumes_for_pair(model, pair)
    for name, stats in volume_summary(volumes).items():
        logger.debug(f"{name}: min {stats['min']:.4g} max {stats['max']:.4g} mean {stats['mean']:.4g}")

    i, j = args.query
    write_pnm(args.out, dump_plane(volumes, args.which, i, j))
    logger.info(f"Wrote {args.which} plane at ({i}, {j}) to {args.out}")
    if args.raw:
        write_volume(args.raw, volumes.get(args.which))
        logger.info(f"Wrote raw {args.which} volume to {args.raw}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    values = FlowConfig.gradcheck(seed=Settings.from_env().default_seed).to_mapping()
    values.update(network_overrides(args))
    cfg = FlowConfig.from_mapping(values)
    all_passed = True
    for offset in range(args.seeds):
        reports = check_all(cfg, seed=cfg.seed + offset)
        for report in reports:
            print(report.line())
        all_passed &= all(r.passed for r in reports)
    return EXIT_OK if all_passed else EXIT_GRADCHECK_FAILED


def cmd_train_toy(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    model, trace = train_toy(dataset, build_flow_config(args), build_train_config(args))
    save_model(model, args.out)
    if trace:
        print(f"loss {trace[0]:.6f} -> {trace[-1]:.6f} over {len(trace)} epochs")
    print(f"lambda {float(model.gate.lam.detach()):.6e}")
    logger.info(f"Saved weights to {args.out}")
    return EXIT_OK


def cmd_features(args: argparse.Namespace) -> int:
    model = model_for(args)
    fmap = encode_single(model, load_image_tensor(args.image), args.which)
    dump_features(fmap, args.out_dir, prefix=args.which)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    pred = flow_from_array(read_flo(args.pred))
    gt = flow_from_array(read_flo(args.gt))
    print(f"AEPE {aepe(pred, gt):.6f}")
    print(f"F1-all {f1_all(pred, gt):.4f}%")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    rows = run_ablation(dataset, build_flow_config(args), build_train_config(args))
    for row in rows:
        print(row.line())
    return EXIT_OK


# ============================================
# PARSER
# ============================================

def add_network_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Base network size (default: toy)")
    parser.add_argument("--iters", dest="iterations", type=int, default=None, help="Refinement iterations")
    parser.add_argument("--gate", dest="gate_mode", choices=["sigmoid", "softmax", "none"], default=None,
                        help="Attention normalization, or none to disable gating")
    parser.add_argument("--lift", dest="lift_enabled", choices=["on", "off"], default=None,
                        help="Lambda-weighted context correlation")
    parser.add_argument("--radius", type=int, default=None, help="Lookup radius")
    parser.add_argument("--levels", type=int, default=None, help="Pyramid levels")
    parser.add_argument("--seed", type=int, default=None, help="Weight initialization seed")


def add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="Directory of pair_* samples")
    parser.add_argument("--epochs", type=int, default=None, help="Gradient descent epochs (default: 200)")
    parser.add_argument("--lr", type=float, default=None, help="Learning rate (default: 1e-3)")
    parser.add_argument("--gamma", type=float, default=None, help="Sequence loss decay (default: 0.8)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key = value config file")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(prog="cgcv", description="Context guided correlation volume flow engine")
    sub = parser.add_subparsers(dest="command", required=True)

    flow = sub.add_parser("flow", parents=[common], help="Estimate flow between two frames")
    flow.add_argument("ref")
    flow.add_argument("tgt")
    flow.add_argument("--out", required=True, help="Output .flo")
    flow.add_argument("--png", default=None, help="Optional color-wheel PNG")
    flow.add_argument("--ckpt", default=None, help="Weights (.cgck); default is fresh seeded weights")
    add_network_flags(flow)
    flow.set_defaults(handler=cmd_flow, inputs=("ref", "tgt", "ckpt"))

    synth = sub.add_parser("synth", parents=[common], help="Render a synthetic pair from a spec file")
    synth.add_argument("--spec", required=True)
    synth.add_argument("--out-dir", required=True)
    synth.set_defaults(handler=cmd_synth, inputs=("spec",))

    volume = sub.add_parser("volume", parents=[common], help="Dump one correlation plane")
    volume.add_argument("ref")
    volume.add_argument("tgt")
    volume.add_argument("--query", type=parse_query, required=True, help="Reference cell 'i,j' (column,row)")
    volume.add_argument("--which", choices=["C", "A", "M", "S", "V"], default="V")
    volume.add_argument("--out", required=True, help="Output .pgm")
    volume.add_argument("--raw", default=None, help="Optional binary dump of the whole volume")
    volume.add_argument("--ckpt", default=None)
    add_network_flags(volume)
    volume.set_defaults(handler=cmd_volume, inputs=("ref", "tgt", "ckpt"))

    grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    grad.add_argument("--seed", type=int, default=None, help="First seed (default: CGCV_DEFAULT_SEED)")
    grad.add_argument("--seeds", type=int, default=1, help="Number of consecutive seeds")
    grad.add_argument("--gate", dest="gate_mode", choices=["sigmoid", "softmax", "none"], default=None)
    grad.set_defaults(handler=cmd_gradcheck, inputs=())

    train = sub.add_parser("train-toy", parents=[common], help="Train on a synthetic dataset")
    add_train_flags(train)
    train.add_argument("--out", required=True, help="Output .cgck")
    add_network_flags(train)
    train.set_defaults(handler=cmd_train_toy, inputs=("data",))

    features = sub.add_parser("features", parents=[common], help="Dump feature channels as PGM")
    features.add_argument("image")
    features.add_argument("--which", choices=["matching", "net", "inp"], default="matching")
    features.add_argument("--out-dir", required=True)
    features.add_argument("--ckpt", default=None)
    add_network_flags(features)
    features.set_defaults(handler=cmd_features, inputs=("image", "ckpt"))

    evaluate = sub.add_parser("evaluate", parents=[common], help="AEPE and F1-all of a predicted flow")
    evaluate.add_argument("pred")
    evaluate.add_argument("gt")
    evaluate.set_defaults(handler=cmd_evaluate, inputs=("pred", "gt"))

    ablate = sub.add_parser("ablate", parents=[common], help="Train every ablation variant")
    add_train_flags(ablate)
    add_network_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate, inputs=("data",))

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit status"""
    parser = build_parser()
    args = parser.parse_args(argv)

    for name in ("config", *args.inputs):
        path = getattr(args, name, None)
        if path is not None and not Path(path).exists():
            parser.error(f"{name}: file not found: {path}")

    try:
        settings = Settings.from_env()
    except (CGCVError, ValidationError) as e:
        setup_logging(Settings(), verbose=args.verbose, quiet=args.quiet)
        logger.error(f"{args.command}: {describe_error(e)}")
        return EXIT_ERROR
    setup_logging(settings, verbose=args.verbose, quiet=args.quiet)
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)

    try:
        return args.handler(args)
    except (CGCVError, ValidationError, OSError) as e:
        logger.error(f"{args.command}: {describe_error(e)}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
