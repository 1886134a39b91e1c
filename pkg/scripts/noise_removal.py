"""How well one refinement round separates injected label noise, per threshold and rule.

Trains the round-0 meta-model once per seed, scores the pool once, then sweeps
tau_low for both demotion rules and tau_high for promotion. Refinement is a pure
function of the score records, so the sweep costs nothing beyond the scoring.

    python scripts/noise_removal.py --config configs/benchmark.yaml --seeds 0 1
"""

import argparse
from pathlib import Path

import numpy as np

from mmq.config import load_config
from mmq.data import carve_quantify, inject_noise
from mmq.maml import meta_train
from mmq.refinement import RefineConfig, refine, round_report, score_pool
from mmq.rng import stream
from mmq.synthetic import generate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=Path("configs/benchmark.yaml"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--tau-low", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.5])
    parser.add_argument("--tau-high", type=float, nargs="+", default=[0.9, 0.99, 0.995, 0.999])
    args = parser.parse_args()

    for seed in args.seeds:
        cfg = load_config(args.config, [f"seed={seed}"])
        pool, _ = generate(cfg.generator_spec())
        pool = inject_noise(pool, cfg.data.noise_rate, stream(seed, "noise"))
        pool, _ = carve_quantify(pool, cfg.fuse.quantify_fraction, stream(seed, "quantify", "carve"))
        model = meta_train(pool, cfg.train, seed)
        records = score_pool(model, pool, cfg.train.ways, cfg.train.update_shots, stream(seed, "score", "round0"),
                             cfg.train.inner_lr, cfg.refine.score_passes, cfg.train.inner_steps)
        print(f"seed {seed}: |M|={len(pool.meta)} noisy={sum(s.noisy for s in pool.meta)}")
        for rule in ("predicted", "gt_score"):
            for lo in args.tau_low:
                hi = max(lo, 0.999)
                rep = round_report(0, pool, refine(pool, records, RefineConfig(lo, hi, demote_rule=rule)))
                print(f"  demote {rule:9s} tau_low={lo:<5} noisy {rep.noisy_demotion_rate:.3f}  "
                      f"clean {rep.clean_demotion_rate:.3f}")
        for hi in args.tau_high:
            rep = round_report(0, pool, refine(pool, records, RefineConfig(min(0.01, hi), hi)))
            precision = rep.promoted_correct / rep.promoted_count if rep.promoted_count else float("nan")
            print(f"  promote tau_high={hi:<6} count {rep.promoted_count:4d}  precision {precision:.3f}")
        confidences = np.array([e.confidence for r in records for e in r.entries])
        print("  confidence quartiles", np.percentile(confidences, [25, 50, 75]).round(3))


if __name__ == "__main__":
    main()
