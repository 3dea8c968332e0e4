"""Upload cost of FedSTO versus plain full-model FedAvg as the Phase 1 share grows.

    python3 scripts/comm_sweep.py configs/cost-100.ini

Keeps the config's total federated round count fixed and moves rounds from
Phase 2 into Phase 1, printing the cost table's totals for each split.
"""

import argparse

from fedsto import comm
from fedsto.cli import comm_table
from fedsto.config import load_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--steps", type=int, default=6, help="number of Phase 1 shares to evaluate")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    fed = cfg.federation.phase1_rounds + cfg.federation.phase2_rounds
    print(f"{'phase1':>7} {'phase2':>7}  {'baseline':>14}  {'FedSTO':>14}  {'saved':>8}")
    for i in range(args.steps):
        p1 = round(fed * i / max(args.steps - 1, 1))
        table = comm_table(cfg.with_updates(federation=dict(phase1_rounds=p1, phase2_rounds=fed - p1)))
        print(f"{p1:>7} {fed - p1:>7}  {comm.fmt_gb(table.baseline_total):>14}  {comm.fmt_gb(table.total):>14}  "
              f"{comm.fmt_pct(table.reduction):>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
