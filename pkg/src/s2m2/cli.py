"""Command-line entry point.

    s2m2 <subcommand> [--config FILE] [--threads N] [--key value ...]

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_suite
from .config import RunConfig, parse_config, parse_overrides
from .data import (ImageDataset, generate_synthetic, load_dataset, load_splits, make_splits,
                   save_dataset, save_splits)
from .errors import ConfigurationError
from .evaluation import evaluate, export_features, robustness_eval, saliency_mask, save_features
from .model import load_checkpoint, save_checkpoint
from .reports import emit_report, format_table, mean_ci
from .training import base_data, method_name, run_s2m2

log = logging.getLogger("s2m2")

SUBCOMMANDS = ("gen-data", "train", "eval", "robust", "saliency", "gradcheck", "export-features")

# (input files that must exist, paths that must be configured)
_REQUIRED = {
    "gen-data": ((), ("dataset",)),
    "train": (("dataset",), ("dataset", "report_dir")),
    "eval": (("dataset", "checkpoint"), ("dataset", "checkpoint", "report_dir")),
    "robust": (("dataset", "checkpoint", "splits"), ("dataset", "checkpoint", "splits", "report_dir")),
    "saliency": (("dataset", "checkpoint", "splits"), ("dataset", "checkpoint", "splits", "report_dir")),
    "gradcheck": ((), ()),
    "export-features": (("dataset", "checkpoint"), ("dataset", "checkpoint")),
}


def validate_paths(name: str, config: RunConfig) -> None:
    """Every path the subcommand needs is configured and every input exists."""
    must_exist, required = _REQUIRED[name]
    if name == "train" and config.splits:
        must_exist += ("splits",)
    if name in ("eval", "export-features") and config.eval_split != "all":
        if not config.splits:
            raise ConfigurationError(f"missing required path 'splits' (eval_split = {config.eval_split})")
        must_exist += ("splits",)
    if name == "export-features" and not (config.features or config.report_dir):
        raise ConfigurationError("missing required path 'features' (or 'report_dir')")
    for key in required:
        if not getattr(config, key):
            raise ConfigurationError(f"missing required path {key!r}")
    for key in must_exist:
        if not Path(getattr(config, key)).is_file():
            raise ConfigurationError(f"{key} = {getattr(config, key)} does not exist")
    if config.report_dir and Path(config.report_dir).exists() and not Path(config.report_dir).is_dir():
        raise ConfigurationError(f"report_dir = {config.report_dir} is not a directory")
    if config.eval_split not in ("base", "val", "novel", "all"):
        raise ConfigurationError(f"eval_split must be base, val, novel or all, got {config.eval_split!r}")


def _classes(config: RunConfig, dataset: ImageDataset) -> tuple:
    if config.eval_split == "all":
        return tuple(range(dataset.class_count))
    return getattr(load_splits(config.splits), config.eval_split)


def _write_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(config: RunConfig) -> int:
    dataset = generate_synthetic(config.seed, config.classes, config.per_class, config.size, config.sample_seed)
    save_dataset(dataset, config.dataset)
    if config.splits:
        save_splits(make_splits(dataset.class_count, config.split_ratios, config.seed, merge_val=config.merge_val),
                    config.splits)
    if config.report_dir:
        _write_config(config, Path(config.report_dir))
    print(f"wrote {len(dataset)} images of {dataset.class_count} classes to {config.dataset}")
    return 0


def cmd_train(config: RunConfig) -> int:
    dataset = load_dataset(config.dataset)
    if config.splits:
        splits = load_splits(config.splits)
    else:
        splits = make_splits(dataset.class_count, config.split_ratios, config.seed, merge_val=config.merge_val)
    method = method_name(config.selfsup, config.phase2)
    run_dir = Path(config.report_dir) / method
    _write_config(config, run_dir)
    save_splits(splits, run_dir / "splits.txt")
    result = run_s2m2(dataset, splits, config.train_config(), n_jobs=config.threads)
    checkpoint = Path(config.checkpoint) if config.checkpoint else run_dir / "checkpoint.fsm"
    save_checkpoint(result.model, checkpoint, extra={"dataset": Path(config.dataset).name})
    emit_report(result.state.history, run_dir, "train_report")
    print(f"{method}: {len(result.state.history)} epochs, checkpoint {checkpoint}")
    return 0


def eval_stem(config: RunConfig) -> str:
    return f"eval_{config.eval_split}_{config.n_way}way_{config.k_shot}shot"


def cmd_eval(config: RunConfig) -> int:
    dataset = load_dataset(config.dataset)
    model = load_checkpoint(config.checkpoint)
    report = evaluate(model.backbone, dataset, _classes(config, dataset), config.episode_spec(),
                      config.adapt_config(), n_jobs=config.threads, dataset_name=Path(config.dataset).name,
                      checkpoint_name=Path(config.checkpoint).name)
    out = Path(config.report_dir)
    stem = eval_stem(config)
    tasks = [{"task": t, "accuracy": float(a)} for t, a in enumerate(report.accuracies)]
    summary = report.to_record()
    row = {"method": model.metadata.get("method", "?"), "n_way": config.n_way, "k_shot": config.k_shot,
           "q": config.q, "tasks": config.tasks, "accuracy (%)": mean_ci(report.mean, report.ci95)}
    emit_report(tasks, out, stem, formats=("jsonl",))
    emit_report([summary], out, f"{stem}.summary", formats=("jsonl",))
    emit_report([row], out, f"{stem}", formats=("table",))
    print(format_table([row]), end="")
    return 0


def _base_split(config: RunConfig, dataset: ImageDataset, model):
    splits = load_splits(config.splits)
    if model.classifier.n_classes != splits.n_base:
        raise ConfigurationError(f"checkpoint classifies {model.classifier.n_classes} classes but the split "
                                 f"has {splits.n_base} base classes")
    return base_data(dataset, splits.base)


def cmd_robust(config: RunConfig) -> int:
    dataset = load_dataset(config.dataset)
    model = load_checkpoint(config.checkpoint)
    x, y = _base_split(config, dataset, model)
    table = robustness_eval(model, x, y, config.kinds, config.severities, config.epsilon)
    records = [{"probe": name, "severities": list(table.severities) if len(values) > 1 else [],
                "accuracy": values} for name, values in table.rows]
    rows = [{"probe": name, **({f"s{s}": v for s, v in zip(table.severities, values)} if len(values) > 1
                               else {f"s{table.severities[0]}": values[0]})} for name, values in table.rows]
    columns = ["probe"] + [f"s{s}" for s in table.severities]
    text = format_table(rows, columns)
    emit_report(records, config.report_dir, "robust", table=text)
    print(text, end="")
    return 0


def cmd_saliency(config: RunConfig) -> int:
    dataset = load_dataset(config.dataset)
    model = load_checkpoint(config.checkpoint)
    x, y = _base_split(config, dataset, model)
    if not 0 <= config.image_index < len(y):
        raise ConfigurationError(f"image_index {config.image_index} outside 0..{len(y) - 1}")
    mask = saliency_mask(model, x[config.image_index], int(y[config.image_index]), config.percentile)
    pixels = [[int(i), int(j)] for i, j in np.argwhere(mask)]
    record = {"image_index": config.image_index, "label": int(y[config.image_index]),
              "percentile": config.percentile, "count": len(pixels), "pixels": pixels}
    grid = "".join("".join("#" if v else "." for v in row) + "\n" for row in mask)
    emit_report([record], config.report_dir, "saliency", table=grid)
    print(grid, end="")
    return 0


def cmd_gradcheck(config: RunConfig) -> int:
    worst, text = gradcheck_suite.main(config.seed)
    print(text)
    if config.report_dir:
        Path(config.report_dir).mkdir(parents=True, exist_ok=True)
        Path(config.report_dir, "gradcheck.txt").write_text(text + "\n")
    return 0 if worst < gradcheck_suite.TOLERANCE else 1


def cmd_export_features(config: RunConfig) -> int:
    dataset = load_dataset(config.dataset)
    model = load_checkpoint(config.checkpoint)
    classes = None if config.eval_split == "all" else _classes(config, dataset)
    dump = export_features(model.backbone, dataset, classes)
    path = Path(config.features) if config.features else Path(config.report_dir) / "features.fsf"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_features(dump, path)
    print(f"wrote {len(dump.class_ids)} features of dimension {dump.dim} to {path}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "robust": cmd_robust,
            "saliency": cmd_saliency, "gradcheck": cmd_gradcheck, "export-features": cmd_export_features}


def run_subcommand(name: str, config: RunConfig) -> int:
    if name not in COMMANDS:
        raise ConfigurationError(f"unknown subcommand {name!r}")
    validate_paths(name, config)
    return COMMANDS[name](config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2m2", description="Few-shot learning with S2M2 on synthetic images.",
                                     epilog="Any config key may be overridden as --key value (dashes or underscores).")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--threads", type=int, help="maximum worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args, rest = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be at least 1")
            overrides["threads"] = str(args.threads)
        config = parse_config(args.config, overrides)
        return run_subcommand(args.subcommand, config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
