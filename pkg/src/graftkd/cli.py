"""``graftkd`` command line.

Device selection: set ``GRAFTKD_DEVICE`` (for example ``cpu`` or ``cuda:0``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import DEVICE_ENV, RunExistsError

log = logging.getLogger("graftkd")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment INI file")
    p.add_argument("--seed-data", type=int, help="override [experiment] seed_data")
    p.add_argument("--seed-init", type=int, help="override [experiment] seed_init")
    p.add_argument("--seed-train", type=int, help="override [experiment] seed_train")
    p.add_argument("--k", type=int, help="override [experiment] k (shots per class)")
    p.add_argument("--out", help="override [experiment] out_dir")
    p.add_argument("--resume", action="store_true", help="continue the run in the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graftkd",
        description="Few-shot distillation by grafting student blocks into a frozen teacher.",
        epilog=f"Set {DEVICE_ENV}=cuda:0 (default cpu) to choose the compute device.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train-teacher", help="cross-entropy training of the teacher"))
    _common(sub.add_parser("run", help="stage 1, stage 2, merge and evaluation (plus the baseline when enabled)"))
    _common(sub.add_parser("stage1", help="block grafting of every student block"))
    _common(sub.add_parser("stage2", help="progressive network grafting from stage-1 checkpoints"))
    _common(sub.add_parser("finalize", help="merge adaption maps into a standalone student"))

    p = sub.add_parser("eval", help="evaluate a network checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/student)")

    p = sub.add_parser("partial-graft", help="replace one teacher block by its stage-1 scion and report")
    _common(p)
    p.add_argument("--block", type=int, required=True, help="block index l (1-based)")
    p.add_argument("--scion", help="stage-1 checkpoint directory (default: <out>/stage1/block<l>)")

    p = sub.add_parser("plot", help="training curves and accuracy-vs-K summary")
    p.add_argument("path", help="run directory or a directory of runs")

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--only", type=int, nargs="*", help="criterion numbers to run")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed_data=args.seed_data, seed_init=args.seed_init, seed_train=args.seed_train, K=args.k, out_dir=args.out
    )


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, RunExistsError, FileNotFoundError, ValueError) as exc:
        print(f"graftkd {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "verify":
        from .verify import run_checks

        results = run_checks(args.only)
        for r in results:
            print(r.line())
        return 0 if all(r.passed for r in results) else 1
    if cmd == "plot":
        from .plots import emit_plots

        for p in emit_plots(args.path):
            print(p)
        return 0

    from . import pipeline

    cfg = _config(args)
    if cmd == "train-teacher":
        path, acc = pipeline.train_teacher(cfg)
        _print_json({"checkpoint": str(path), **acc})
    elif cmd == "run":
        m = pipeline.run_pipeline(cfg, resume=args.resume)
        _print_json({"run_dir": str(m.run_dir), "status": m.status, **m.metrics})
    elif cmd in ("stage1", "stage2", "finalize"):
        resume = args.resume or cmd != "stage1"
        m = pipeline.run_pipeline(cfg, resume=resume, stages=(cmd,))
        _print_json({"run_dir": str(m.run_dir), "status": m.status, **m.metrics})
    elif cmd == "eval":
        path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "student"
        _print_json({"checkpoint": str(path), **pipeline.evaluate_checkpoint(path, cfg)})
    elif cmd == "partial-graft":
        from .checkpoint import load_network, load_scions

        data = pipeline.load_run_data(cfg)
        teacher = load_network(cfg.teacher_checkpoint).to(pipeline.device_from_env()).eval()
        path = Path(args.scion) if args.scion else Path(cfg.out_dir) / "stage1" / f"block{args.block}"
        scions = [s for s in load_scions(path, teacher) if s.index == args.block]
        report = pipeline.partial_graft_report(teacher, scions[0] if scions else None, args.block, data.test_set)
        print(report.table())
        print(report.params_cell())
        out = Path(cfg.out_dir)
        if out.is_dir():
            (out / f"partial_graft_block{args.block}.json").write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
