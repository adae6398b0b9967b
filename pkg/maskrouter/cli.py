# maskrouter/cli.py
"""Command-line pipeline: gen -> pretrain -> finetune / sweep / prune -> route -> analyze."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import pandas as pd

from maskrouter.engine.analysis import correlation_report, similarity_matrix
from maskrouter.engine.data import GenSpec, TaskDataset, TaskSuite, gen_data, load_suite, pool_datasets, \
    read_inventories, read_token_lines, save_suite
from maskrouter.engine.masking import InitScheme, MaskScope
from maskrouter.engine.model import Backbone, ModelConfig, build_head, pretrain_surrogate
from maskrouter.engine.router import MaskRegistry, load_registry, save_registry
from maskrouter.engine.training import (
    TrainConfig,
    TrainMode,
    TriStageSchedule,
    accuracy,
    init_ablation,
    iterative_magnitude_prune,
    one_shot_magnitude_prune,
    scope_ablation,
    sparsity_sweep,
    train,
)
from maskrouter.utils import config, mask_io
from maskrouter.utils.errors import EXIT_OK, ConfigError, MaskRouterError, UsageError
from maskrouter.utils.logger import setup_logger

logger = logging.getLogger("maskrouter.cli")

MANIFEST = "manifest.cfg"


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _scope(text: str) -> MaskScope:
    try:
        return MaskScope.parse(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


# Building configs: flags > config file > defaults

def _train_config(args, sections, **overrides) -> TrainConfig:
    schedule = config.build(TriStageSchedule, sections["schedule"])
    flags = {
        "mode": getattr(args, "mode", None),
        "sparsity": getattr(args, "sparsity", None),
        "scope": getattr(args, "scope", None),
        "init_scheme": getattr(args, "init", None),
        "steps": getattr(args, "steps", None),
        "peak_lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": args.seed,
    }
    flags.update(overrides)
    return config.build(TrainConfig, {**sections["train"], "schedule": schedule}, **flags)


def _suite(args) -> TaskSuite:
    if not args.data:
        raise UsageError("--data is required")
    return load_suite(args.data)


def _task_split(suite: TaskSuite, task_id: str) -> tuple[TaskDataset, TaskDataset]:
    if task_id not in suite.train:
        raise UsageError(f"task {task_id!r} not in data directory (have {suite.task_ids})")
    return suite.train[task_id], suite.eval[task_id]


def _backbone(args) -> Backbone:
    if not args.backbone:
        raise UsageError("--backbone is required")
    return mask_io.load_backbone(args.backbone)


def _write_frame(frame: pd.DataFrame, path: str | Path | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {path}")
    else:
        frame.to_csv(sys.stdout, index=False)


# Subcommands

def cmd_gen(args, sections) -> int:
    spec = config.build(GenSpec, sections["gen"], n_tasks=args.n_tasks, seed=args.seed)
    save_suite(gen_data(spec), args.out)
    return EXIT_OK


def cmd_pretrain(args, sections) -> int:
    suite = _suite(args)
    defaults = {"vocab_size": suite.spec.vocab_size, "max_seq_len": max(32, suite.spec.seq_len)}
    cfg = config.build(ModelConfig, {**defaults, **sections["model"]}, seed=args.seed)
    tcfg = _train_config(args, sections)
    backbone = pretrain_surrogate(cfg, pool_datasets(list(suite.train.values())), tcfg.steps,
                                  batch_size=tcfg.batch_size, peak_lr=tcfg.peak_lr, seed=tcfg.seed,
                                  eval_interval=tcfg.eval_interval)
    mask_io.save_backbone(backbone, args.out)
    print(f"pretrained {backbone.num_parameters} parameters -> {args.out}")
    return EXIT_OK


def cmd_finetune(args, sections) -> int:
    suite = _suite(args)
    data, eval_data = _task_split(suite, args.task)
    backbone = _backbone(args)
    cfg = _train_config(args, sections)
    if cfg.mode is TrainMode.WEIGHT_FT:
        backbone = backbone.clone(frozen=False)
    head = build_head(backbone.cfg.d_model, data.n_classes, cfg.seed)
    result = train(backbone, head, cfg, data, eval_data, task_id=args.task)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    slot = result.slot
    mask_io.save_head(slot.head, out / f"{args.task}.head.bin")
    if slot.masks:
        mask_io.save_masks(slot.masks, out / f"{args.task}.masks.bin")
    if slot.scores is not None:
        mask_io.save_scores(slot.scores.arrays(), slot.scores.keep_counts(slot.budget), out / f"{args.task}.scores.bin")
    if cfg.mode is TrainMode.WEIGHT_FT:
        mask_io.save_backbone(slot.backbone.clone(frozen=True), out / f"{args.task}.backbone.bin")
    _write_frame(result.metrics_frame(), out / f"{args.task}.metrics.csv")
    print(f"{args.task} {cfg.mode.value} accuracy={result.final_accuracy:.4f}")
    return EXIT_OK


def cmd_sweep(args, sections) -> int:
    suite = _suite(args)
    data, eval_data = _task_split(suite, args.task)
    backbone = _backbone(args)
    cfg = _train_config(args, sections)
    if args.inits:
        frame = init_ablation(backbone, cfg, data, args.sparsities or [cfg.sparsity], args.inits, eval_data, args.jobs)
    elif args.scopes:
        frame = scope_ablation(backbone, cfg, data, args.scopes, eval_data, args.jobs)
    else:
        if not args.sparsities:
            raise UsageError("sweep needs --sparsities, --scopes or --inits")
        frame = sparsity_sweep(backbone, cfg, data, args.sparsities, eval_data, args.jobs)
    _write_frame(frame, args.out)
    return EXIT_OK


def cmd_prune(args, sections) -> int:
    suite = _suite(args)
    data, eval_data = _task_split(suite, args.task)
    backbone = _backbone(args)
    cfg = _train_config(args, sections, mode=TrainMode.PRUNE_TWO_PHASE)
    head = build_head(backbone.cfg.d_model, data.n_classes, cfg.seed)
    result = train(backbone, head, cfg, data, eval_data, task_id=args.task)

    tuned = result.phase1.slot
    omp = one_shot_magnitude_prune(tuned, cfg.sparsity)
    imp = iterative_magnitude_prune(tuned, cfg, data, eval_data, rounds=args.rounds)
    frame = pd.DataFrame([{
        "sparsity": cfg.sparsity,
        "weight_finetune": result.phase1.final_accuracy,
        "two_phase": result.final_accuracy,
        "one_shot_magnitude": accuracy(omp.backbone, omp.head, eval_data, omp.masks),
        "iterative_magnitude": imp.final_accuracy,
    }])
    _write_frame(frame, args.out)
    return EXIT_OK


def cmd_route(args, sections) -> int:
    registry_dir = Path(args.registry)
    manifest = registry_dir / MANIFEST
    if args.register:
        suite = _suite(args)
        reg = load_registry(manifest) if manifest.exists() else MaskRegistry(_backbone(args))
        cfg = _train_config(args, sections, mode=TrainMode.MASK_FT)
        for task_id in args.register:
            data, eval_data = _task_split(suite, task_id)
            reg.register_task(task_id, cfg, data, eval_data)
        save_registry(reg, registry_dir)
    else:
        reg = load_registry(manifest)

    if args.eval:
        if not args.input:
            raise UsageError("--eval needs --input")
        tokens, labels = read_token_lines(args.input)
        model = reg.switch_task(args.eval)
        predictions = model.predict(tokens)
        print("\n".join(str(int(p)) for p in predictions))
        if labels is not None:
            logger.info(f"{args.eval}: accuracy={float((predictions == labels).mean()):.4f} on {len(labels)} examples")
    print(reg.storage_report().model_dump_json(indent=2))
    return EXIT_OK


def cmd_analyze(args, sections) -> int:
    reg = load_registry(Path(args.registry) / MANIFEST)
    inventories = read_inventories(args.inventories)
    layer = int(args.layer) if args.layer.lstrip("-").isdigit() else args.layer
    report = correlation_report(reg, inventories, layer)
    _write_frame(report.to_frame(), args.out)
    if args.per_layer:
        _write_frame(report.per_layer_frame(), args.per_layer)
    if args.matrix:
        similarity_matrix(reg.masks_by_task()).write_csv(args.matrix)
    print(f"layer={report.layer} pearson={report.pearson:.6f} spearman={report.spearman:.6f}")
    return EXIT_OK


def cmd_serve(args, sections) -> int:
    import os

    import uvicorn

    if args.manifest:
        os.environ["MASKROUTER_MANIFEST"] = str(args.manifest)
    uvicorn.run("maskrouter.main:app", host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskrouter", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [model] [train] [schedule] [gen] sections")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--log-level", help="overrides MASKROUTER_LOG_LEVEL")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory written by `gen`")
    data.add_argument("--backbone", help="frozen backbone checkpoint")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--sparsity", type=float)
    training.add_argument("--scope", type=_scope, help="ffn | sa | both | groups=BITS")
    training.add_argument("--init", type=InitScheme, choices=list(InitScheme), metavar="{ri,wmi,ori}")
    training.add_argument("--steps", type=int)
    training.add_argument("--lr", type=float, help="peak learning rate")
    training.add_argument("--batch-size", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate the synthetic task suite")
    p.add_argument("--spec", dest="config", help="alias of --config")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", parents=[common, data, training], help="pretrain and freeze a backbone")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, data, training], help="train one task slot")
    p.add_argument("--mode", type=TrainMode, choices=[TrainMode.WEIGHT_FT, TrainMode.MASK_FT, TrainMode.HEAD_ONLY],
                   metavar="{weight,mask,head}")
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", parents=[common, data, training], help="sparsity, scope or init sweeps")
    p.add_argument("--task", required=True)
    p.add_argument("--sparsities", type=_float_list)
    p.add_argument("--scopes", type=_str_list)
    p.add_argument("--inits", type=_str_list)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prune", parents=[common, data, training], help="two-phase pruning against magnitude baselines")
    p.add_argument("--task", required=True)
    p.add_argument("--rounds", type=int, default=3, help="iterative magnitude pruning rounds")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("route", parents=[common, data, training], help="register tasks or evaluate through the registry")
    p.add_argument("--registry", required=True, help="registry directory")
    p.add_argument("--register", nargs="+", metavar="TASK")
    p.add_argument("--eval", metavar="TASK")
    p.add_argument("--input", help="token batch file, one sequence per line")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("analyze", parents=[common], help="mask similarity vs inventory similarity")
    p.add_argument("--registry", required=True)
    p.add_argument("--inventories", required=True)
    p.add_argument("--layer", default="0", help="masked-layer index or layer id")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--per-layer", help="per-layer correlation CSV")
    p.add_argument("--matrix", help="full similarity matrix CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", parents=[common], help="serve routed inference over HTTP")
    p.add_argument("--manifest")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    config.load_env()
    args = build_parser().parse_args(argv)
    setup_logger("maskrouter", level=args.log_level)
    try:
        sections = config.read_config_file(args.config)
        return args.func(args, sections)
    except MaskRouterError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
