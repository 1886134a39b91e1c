"""Command-line entry point: ``mmq <stage> [--config PATH] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import DataError, MMQError
from .report import report_render

STAGES = {
    "gen-data": "render the synthetic pool, inject label noise, hold out the quantify pool",
    "meta-train": "train one meta-model on the generated pool",
    "refine-loop": "train loop.m meta-models with refinement between them",
    "quantify": "rank the loop's meta-models by fuse score and select fuse.n",
    "train-downstream": "train the downstream classifier on the selected meta-models",
    "ablate": "run the ablate.grid of (m, n) cells and write a report",
    "full-pipeline": "gen-data, meta-train, refine-loop, quantify, train-downstream",
    "report": "render results files as a table sorted by (m, n)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmq", description="Multiple meta-model quantifying pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage, summary in STAGES.items():
        p = sub.add_parser(stage, help=summary, description=summary)
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if stage == "report":
            p.add_argument("results", nargs="*", type=Path,
                           help="results files (default: the run's downstream and ablate results)")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def run(args) -> str:
    cfg = _config(args)
    lay = pipeline.Layout(Path(cfg.out_dir))
    if args.stage == "gen-data":
        pool, held, dset = pipeline.gen_data(cfg)
        return (f"wrote {len(pool)} pool samples ({len(pool.meta)} meta, noisy fraction "
                f"{pool.noisy_fraction():.3f}), {len(held)} quantify samples, "
                f"{len(dset.train)}+{len(dset.test)} downstream examples")
    if args.stage == "meta-train":
        pipeline.meta_train_stage(cfg)
        return f"meta-trained {cfg.train.iterations} iterations -> {lay.meta_model}"
    if args.stage == "refine-loop":
        result = pipeline.refine_loop_stage(cfg)
        stats = result.pool.stats()
        return f"{len(result.models)} meta-models, final |M|={stats['meta']} |U|={stats['unlabeled']}"
    if args.stage == "quantify":
        result = pipeline.quantify_stage(cfg)
        return "selected rounds " + ",".join(str(m.round) for m in result.selected)
    if args.stage == "train-downstream":
        result = pipeline.train_downstream_stage(cfg)
        return f"train accuracy {result.train_acc:.4f}, test accuracy {result.test_acc:.4f}"
    if args.stage == "ablate":
        pipeline.ablate(cfg)
        return lay.ablate_table.read_text().rstrip()
    if args.stage == "full-pipeline":
        result = pipeline.full_pipeline(cfg)
        return f"test accuracy {result.test_acc:.4f}; artifacts in {cfg.out_dir}"
    paths = args.results or [p for p in (lay.downstream_results, lay.ablate_results) if p.exists()]
    if not paths:
        raise DataError(f"no results files found under {cfg.out_dir}")
    return report_render(paths, lay.root / "report.txt", lay.root / "report.tsv").rstrip()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(run(args))
    except MMQError as exc:
        print(f"mmq {args.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
