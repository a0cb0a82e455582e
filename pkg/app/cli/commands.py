"""
Command-line commands: train, eval, generate, gradcheck, ablate, make-toy
"""
import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.core.ablation import DEFAULT_FRACTION, parameter_deltas, run_ablation, write_ablation_rows
from app.core.checkpoint import load_checkpoint
from app.core.config_service import ConfigService
from app.core.data import PairedSample, load_pairs, toy_dataset, write_toy_dataset
from app.core.errors import ConfigError, DataError, GradcheckError, XvfgError
from app.core.gradcheck import SUITES, run_gradcheck
from app.core.metrics import ConstantProbe, ConvProbe, ProbeClassifier, write_metric_rows
from app.core.models import TrainConfig
from app.core.trainer import PROBE_PREFIX, evaluate, generate_images, load_model, train
from .cli_dto import (
    AblateRequest,
    DataSource,
    EvalRequest,
    GenerateRequest,
    GradcheckRequest,
    MakeToyRequest,
    TrainRequest,
)


logger = logging.getLogger(__name__)

# toy evaluation scenes are drawn from seeds far from any training seed
HELD_OUT_SEED_OFFSET = 100_000

# flag name -> TrainConfig key; flags left unset do not override the config file
TRAIN_OVERRIDES = {
    "direction": "direction",
    "size": "size",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "ablation": "ablation",
    "max_iterations": "max_iterations",
}


def _request(model, args: argparse.Namespace, **extra):
    fields = {name: getattr(args, name) for name in model.model_fields if hasattr(args, name)}
    fields.update(extra)
    try:
        return model(**{k: v for k, v in fields.items() if v is not None})
    except ValidationError as e:
        raise ConfigError(f"Invalid arguments: {e}") from e


def _run_config(args: argparse.Namespace, config_path: Optional[str], out: Optional[str]) -> TrainConfig:
    overrides: Dict[str, Any] = {key: getattr(args, flag, None) for flag, key in TRAIN_OVERRIDES.items()}
    if out is not None:
        overrides["output_dir"] = out
    return ConfigService.load_run_config(config_path, overrides)


def _training_samples(source: DataSource, config: TrainConfig) -> List[PairedSample]:
    if source.is_toy:
        return toy_dataset(config.toy_samples, config.size, config.seed)
    return list(load_pairs(ConfigService.resolve_data_path(source.data), source.layout, config.size, config.semantic_classes))


def _held_out_samples(source: DataSource, config: TrainConfig, count: int) -> List[PairedSample]:
    if source.is_toy:
        return toy_dataset(count, config.size, config.seed + HELD_OUT_SEED_OFFSET)
    return list(load_pairs(ConfigService.resolve_data_path(source.data), source.layout, config.size, config.semantic_classes))


def _load_probe(source: Optional[str], classes: int) -> Optional[ProbeClassifier]:
    if source is None:
        return None
    if source == "uniform":
        return ConstantProbe.uniform(classes)
    tensors = load_checkpoint(source)
    if not any(name.startswith(PROBE_PREFIX) for name in tensors):
        raise DataError(f"{source} holds no probe classifier")
    return ConvProbe.from_state_dict(tensors, PROBE_PREFIX)


# ---------------------------------------------------------------- commands

def cmd_train(args: argparse.Namespace) -> int:
    request = _request(TrainRequest, args)
    config = _run_config(args, request.config, request.out)
    samples = _training_samples(request, config)
    result = train(config, samples)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.log_path} ({len(result.log)} iterations)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    request = _request(EvalRequest, args)
    model, _ = load_model(request.checkpoint)
    probe = _load_probe(request.probe, model.config.semantic_classes)
    samples = _held_out_samples(request, model.config, request.eval_samples)
    rows = evaluate(request.checkpoint, samples, probe)
    chosen = rows if request.include_stage1 else rows[:1]
    write_metric_rows(request.out, chosen)
    for row in chosen:
        print(
            f"{row.method} {row.direction} {row.size}: ssim={row.ssim:.4f} psnr={row.psnr:.4f} "
            f"kl={row.kl_mean:.4f}±{row.kl_std:.4f} top1={row.top1:.4f} top5={row.top5:.4f}"
        )
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    request = _request(GenerateRequest, args)
    model, _ = load_model(request.checkpoint)
    samples = _held_out_samples(request, model.config, request.eval_samples)
    paths = generate_images(model, samples, request.out)
    print(f"wrote {len(paths)} images to {request.out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    request = _request(GradcheckRequest, args)
    modules = list(SUITES) if request.module == "all" else [request.module]
    failures = []
    print(f"{'module':<10} {'op':<28} {'max_rel_err':>12}  worst")
    for module in modules:
        for result in run_gradcheck(module, request.seed, max_entries=request.max_entries, raise_on_failure=False):
            status = "ok" if result.passed else "FAIL"
            print(
                f"{result.module:<10} {result.op:<28} {result.max_rel_err:>12.3e}  "
                f"{result.worst_input}{list(result.worst_index)} {status}"
            )
            if not result.passed:
                failures.append(result)
    if failures:
        listing = "; ".join(f"{r.module}.{r.op} at {r.worst_input}{list(r.worst_index)} (rel err {r.max_rel_err:.3e})" for r in failures)
        raise GradcheckError(f"Gradient check failed: {listing}", violations=failures)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    request = _request(AblateRequest, args)
    config = _run_config(args, request.config, request.out)
    samples = _training_samples(request, config)
    held_out = _held_out_samples(request, config, request.eval_samples)

    for ablation, delta in parameter_deltas(config).items():
        logger.info(f"Row {ablation} adds {delta} parameters over the previous row")

    rows = run_ablation(config, samples, held_out, request.seeds, request.fraction, config.output_dir)
    path = os.path.join(config.output_dir, "ablation.csv")
    write_ablation_rows(path, rows)
    for row in rows:
        print(f"{row.seed:>6} {row.baseline} {row.method:<22} psnr={row.psnr:.4f} ssim={row.ssim:.4f}")
    print(f"ablation table: {path}")
    return 0


def cmd_make_toy(args: argparse.Namespace) -> int:
    request = _request(MakeToyRequest, args)
    ids = write_toy_dataset(request.out, request.count, request.size, request.seed)
    print(f"wrote {len(ids)} toy pairs to {request.out}")
    return 0


# ---------------------------------------------------------------- parser

def _add_data(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--data", required=required, help="dataset directory, or 'toy' for generated scenes")
    parser.add_argument("--layout", choices=["side-by-side", "split-folders"], help="dataset layout (auto-detected)")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--direction", choices=["a2g", "g2a"])
    parser.add_argument("--size", type=int, choices=[32, 64, 256])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xvfg", description="Cross-view image synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_data(p)
    _add_run_flags(p)
    p.add_argument("--ablation", choices=["A", "B", "C", "D"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="append a metric row for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.add_argument("--probe", help="probe checkpoint, or 'uniform'")
    p.add_argument("--out", required=True, help="metric CSV (appended)")
    p.add_argument("--include-stage1", dest="include_stage1", action="store_true")
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("generate", help="write synthesised target views")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.add_argument("--out", required=True, help="image directory")
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=[*SUITES, "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", dest="max_entries", type=int)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score rows A-D")
    _add_data(p)
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("make-toy", help="write the toy dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_make_toy)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse and dispatch; returns the process exit code"""
    args = build_parser().parse_args(argv)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except XvfgError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
