"""Run the ablation grid over several seeds and print per-seed and mean test accuracy.

    python scripts/trend.py --config configs/benchmark.yaml --seeds 0 1 2 3 4 --out runs/trend
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from mmq import pipeline
from mmq.config import load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=Path("configs/benchmark.yaml"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", type=Path, default=Path("runs/trend"))
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    acc: dict[tuple[int, int], list[float]] = {}
    lines = ["seed\tm\tn\ttest_acc\tseconds"]
    for seed in args.seeds:
        cfg = load_config(args.config, [*args.overrides, f"seed={seed}", f"out_dir={args.out / f'seed{seed}'}"])
        started = time.perf_counter()
        rows = pipeline.ablate(cfg)
        elapsed = time.perf_counter() - started
        for r in rows:
            acc.setdefault((r.m, r.n), []).append(float(r.accuracy))
            lines.append(f"{seed}\t{r.m}\t{r.n}\t{r.accuracy}\t{elapsed:.0f}")
        print(f"seed {seed}: " + "  ".join(f"{r.m}/{r.n}={float(r.accuracy):.4f}" for r in rows)
              + f"  ({elapsed:.0f}s)", flush=True)

    print("\nm/n    mean     std")
    for (m, n), values in sorted(acc.items()):
        print(f"{m}/{n}  {np.mean(values):.4f}  {np.std(values):.4f}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "trend.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
