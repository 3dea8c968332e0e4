"""FedSTO against its two reference points, seed by seed.

    python3 scripts/compare_baselines.py configs/desk.ini --seeds 1,2,3 --out runs/compare.json

For each seed the three arms share one dataset. The warm-up-only numbers come
from the FedSTO run itself (server model right after warm-up). The second run
drops the Phase 1 rounds and goes straight to full-model training.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from fedsto.config import load_config
from fedsto.federation import build_data, run_fedsto


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", help="comma separated; defaults to the config's seeds")
    ap.add_argument("--out", type=Path, help="write per-seed numbers as JSON here")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.run.seeds)
    ablation = cfg.with_updates(federation=dict(skip_phase1=True))
    rows = []
    print(f"{'seed':>4}  {'FedSTO':>8}  {'warm-up':>8}  {'no P1':>8}  {'secs':>6}")
    for seed in seeds:
        t0 = time.perf_counter()
        data = build_data(cfg, seed)
        full = run_fedsto(cfg, seed, data=data, sensitivity=False).report
        abl = run_fedsto(ablation, seed, data=data, sensitivity=False).report
        row = {"seed": seed, "fedsto": full.mean_map(full.final), "warmup_only": full.mean_map(full.warmup_only),
               "no_phase1": abl.mean_map(abl.final),
               "per_domain": {"fedsto": full.final, "warmup_only": full.warmup_only, "no_phase1": abl.final}}
        rows.append(row)
        print(f"{seed:>4}  {row['fedsto']:8.4f}  {row['warmup_only']:8.4f}  {row['no_phase1']:8.4f}  "
              f"{time.perf_counter() - t0:6.1f}")
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("fedsto", "warmup_only", "no_phase1")}
    print(f"{'mean':>4}  {means['fedsto']:8.4f}  {means['warmup_only']:8.4f}  {means['no_phase1']:8.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"config": str(args.config), "means": means, "seeds": rows}, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
