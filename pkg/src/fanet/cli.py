"""Command-line entry point: ``fanet <command> [--config FILE] [--key value ...]``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error. Diagnostics go to stderr; results go to files under
``--out``, next to a ``config.txt`` holding the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, restore_params
from .config import KEYS, ConfigError, RunConfig, resolve
from .evaluate import export_attention_maps
from .experiment import build_params, evaluate_model, run_experiment, write_eval
from .gradcheck import run_suite
from .imageio import ImageFormatError
from .model import ABLATION_ROWS
from .synth import RenderError, generate_dataset, load_dataset

logger = logging.getLogger("fanet")

COMMANDS = ("gen", "train", "eval", "export-maps", "grad-check", "ablate")
REQUIRED = {
    "gen": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "checkpoint"),
    "export-maps": ("data", "checkpoint", "out"),
    "grad-check": (),
    "ablate": ("data", "out"),
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    for key in KEYS:
        flag = "--" + key.replace("_", "-")
        names = [flag] if flag == f"--{key}" else [flag, f"--{key}"]
        common.add_argument(*names, dest=key, default=argparse.SUPPRESS, metavar="VALUE")

    parser = argparse.ArgumentParser(prog="fanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen": "render a synthetic benchmark",
        "train": "train one configuration and evaluate it",
        "eval": "evaluate a checkpoint",
        "export-maps": "write Zf/Zb attention maps as PGM",
        "grad-check": "finite-difference check of every differentiable op",
        "ablate": "train and compare the ablation rows",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in KEYS if hasattr(args, k)}
    config_path = args.config
    if config_path is None and args.command in ("eval", "export-maps") and "checkpoint" in overrides:
        beside = Path(overrides["checkpoint"]).with_name("config.txt")
        if beside.exists():
            logger.info("using %s", beside)
            config_path = str(beside)
    cfg = resolve(config_path, overrides)
    if config_path != args.config and "out" not in overrides:
        cfg.out = None  # never write into the training run's own directory by default
    missing = [k for k in REQUIRED[args.command] if getattr(cfg, k) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + k for k in missing))
    return cfg


def _write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())


def _load_trained(cfg: RunConfig):
    ds = load_dataset(cfg.data)
    params = build_params(ds, cfg.ablation(), cfg.backbone_config(), cfg.seed)
    restore_params(params, load_checkpoint(cfg.checkpoint))
    return ds, params


def cmd_gen(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    spec = cfg.dataset_spec()
    start = time.perf_counter()
    rows = generate_dataset(spec, out, workers=cfg.workers)
    _write_config(cfg, out)
    logger.info("wrote %d samples to %s in %.1fs", len(rows), out, time.perf_counter() - start)


def cmd_train(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    _write_config(cfg, out)
    ds = load_dataset(cfg.data)
    result = run_experiment(
        ds, cfg.ablation(), cfg.schedule(), cfg.backbone_config(), cfg.seed, cfg.sgd(), out,
        eval_every=cfg.eval_every, max_iterations=cfg.max_iterations,
    )
    logger.info("%s", result.report.to_text().strip())


def cmd_eval(cfg: RunConfig) -> None:
    out = Path(cfg.out) if cfg.out else Path(cfg.checkpoint).parent / "eval"
    _write_config(cfg, out)
    ds, params = _load_trained(cfg)
    report, extra = evaluate_model(ds, params)
    write_eval(out, report, extra)
    logger.info("%s", report.to_text().strip())


def cmd_export_maps(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    _write_config(cfg, out)
    ds, params = _load_trained(cfg)
    idx = np.arange(len(ds.rows)) if cfg.split == "all" else ds.indices(cfg.split)
    if len(idx) == 0:
        raise UsageError(f"split {cfg.split!r} is empty (use train, query, gallery or all)")
    stems = [Path(ds.rows[i].path).stem for i in idx]
    files = export_attention_maps(ds.images[idx], stems, params, out)
    logger.info("wrote %d maps to %s", len(files), out)


def cmd_grad_check(cfg: RunConfig) -> bool:
    start = time.perf_counter()
    results = run_suite(cfg.seed)
    elapsed = time.perf_counter() - start
    lines = ["check\trel_error\ttolerance\tstatus"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name}\t{r.error:.3e}\t{r.tolerance:g}\t{status}")
        (logger.info if r.passed else logger.error)("%-24s %.3e %s", r.name, r.error, status)
    failed = sum(not r.passed for r in results)
    logger.info("%d checks, %d failed, %.1fs", len(results), failed, elapsed)
    if cfg.out:
        out = Path(cfg.out)
        _write_config(cfg, out)
        (out / "gradcheck.tsv").write_text("\n".join(lines) + "\n")
    return failed == 0


def ablation_table(rows: list[tuple[str, dict]]) -> str:
    cols = ("rank1", "rank5", "mAP", "camera_accuracy", "mean_mask_iou")
    out = ["row\t" + "\t".join(cols)]
    for name, m in rows:
        out.append(name + "\t" + "\t".join("" if m.get(c) is None else f"{m[c]:.4f}" for c in cols))
    return "\n".join(out) + "\n"


def cmd_ablate(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    _write_config(cfg, out)
    names = list(cfg.rows) if cfg.rows else list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise UsageError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    ds = load_dataset(cfg.data)
    table = []
    for name in names:
        ablation = replace(ABLATION_ROWS[name], k=cfg.k, embed_dim=cfg.embed_dim, stripe_pool=cfg.stripe_pool)
        row_cfg = cfg.with_ablation(ablation)
        row_dir = out / (name.lstrip("+").lower())
        row_cfg.out = str(row_dir)
        row_cfg.rows = None
        _write_config(row_cfg, row_dir)
        logger.info("ablation row %s -> %s", name, row_dir)
        r = run_experiment(
            ds, ablation, cfg.schedule(), cfg.backbone_config(), cfg.seed, cfg.sgd(), row_dir,
            max_iterations=cfg.max_iterations,
        )
        table.append((name, r.report.metrics()))
        (out / "ablation.tsv").write_text(ablation_table(table))
    logger.info("\n%s", ablation_table(table))


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-maps": cmd_export_maps,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _resolve(args)
        cfg.validate()
        ok = HANDLERS[args.command](cfg)
    except (UsageError, ConfigError) as e:
        print(f"fanet {args.command}: {e}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ImageFormatError, RenderError, ValueError, FloatingPointError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 1 if ok is False else 0


if __name__ == "__main__":
    sys.exit(main())
