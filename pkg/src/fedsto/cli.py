"""Command line: ``python -m fedsto {run,comm-report,eval,theory-check} <config> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import comm
from .config import Config, dump_config, load_config
from .federation import PHASE1, PHASE2, WARMUP, build_data, evaluate_model, model_sizes, run_fedsto
from .model import ConfigError, atomic_write, init_model, load_checkpoint, save_checkpoint
from .synth import Domain
from .theory import (LinearTwoLayer, penalty_empirical, penalty_trace, random_triple, semi_orthogonal)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def seed_aggregate(finals: list[dict[str, dict[str, float]]]) -> dict:
    """Mean and population std over seeds of each domain's final mAP."""
    out = {}
    for dom in finals[0]:
        out[dom] = {}
        for key in ("map50", "map75"):
            vals = np.array([f[dom][key] for f in finals], dtype=float)
            out[dom][key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    means = np.array([np.mean([f[d]["map50"] for d in f]) for f in finals])
    out["mean_over_domains"] = {"map50": {"mean": float(means.mean()), "std": float(means.std(ddof=0))}}
    return out


def summary_table(agg: dict) -> str:
    rows = [("domain", "mAP@0.5", "mAP@0.75")]
    for dom, v in agg.items():
        m75 = v.get("map75")
        rows.append((dom, f"{v['map50']['mean']:.4f} ± {v['map50']['std']:.4f}",
                     "" if m75 is None else f"{m75['mean']:.4f} ± {m75['std']:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def run_experiment(cfg: Config, out: Path | None = None, log=print) -> Path:
    """Run every seed and write the artifact set under ``out``.

    Files: config.ini, seed<s>/metrics.jsonl, seed<s>/report.json,
    seed<s>/checkpoints/<entity>.ckpt, summary.json, summary.txt.
    """
    out = Path(out or cfg.run.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, output=str(out)))
    atomic_write(out / "config.ini", dump_config(cfg))
    finals, warms = [], []
    for seed in cfg.run.seeds:
        log(f"seed {seed}: running")
        res = run_fedsto(cfg, seed)
        sdir = out / f"seed{seed}"
        (sdir / "checkpoints").mkdir(parents=True, exist_ok=True)
        atomic_write(sdir / "metrics.jsonl", "\n".join(res.report.metrics_lines()) + "\n")
        atomic_write(sdir / "report.json", _dumps(res.report.summary()))
        save_checkpoint(res.server.params, sdir / "checkpoints" / "server.ckpt")
        save_checkpoint(res.warmup_params, sdir / "checkpoints" / "warmup.ckpt")
        for c in res.clients:
            save_checkpoint(c.params, sdir / "checkpoints" / f"client{c.cid}.ckpt")
        finals.append(res.report.final)
        warms.append(res.report.warmup_only)
        log(f"seed {seed}: final mean mAP@0.5 {res.report.mean_map(res.report.final):.4f} "
            f"(warm-up only {res.report.mean_map(res.report.warmup_only):.4f})")
    agg = seed_aggregate(finals)
    summary = {"seeds": list(cfg.run.seeds), "n_seeds": len(cfg.run.seeds), "final": agg,
               "warmup_only": seed_aggregate(warms)}
    atomic_write(out / "summary.json", _dumps(summary))
    atomic_write(out / "summary.txt", summary_table(agg))
    return out


def comm_table(cfg: Config) -> comm.CostTable:
    f = cfg.federation
    sizes = model_sizes(cfg, init_model(cfg.model, 0))
    rounds = {WARMUP: f.warmup_rounds, PHASE1: 0 if f.skip_phase1 else f.phase1_rounds, PHASE2: f.phase2_rounds}
    ledger = comm.plan_ledger(f.num_clients, f.sample_ratio, rounds, sizes, f.phase1_upload)
    return comm.comm_report(ledger, sizes)


def theory_check(cfg: Config, seed: int) -> tuple[list[str], bool]:
    rng = np.random.default_rng([seed, 0x7E0])
    lines, ok = [], True
    for i in range(cfg.run.theory_triples):
        m = random_triple(rng)
        emp, se = penalty_empirical(m, cfg.run.theory_samples, rng)
        tr = penalty_trace(m)
        z = abs(emp - tr) / se
        ortho = LinearTwoLayer(m.B, semi_orthogonal(m.W), m.sigma)
        gap = abs(penalty_trace(ortho) - float(np.trace(m.B.T @ m.B @ m.sigma)))
        good = z <= 3.0 and gap <= 1e-6
        ok &= good
        lines.append(f"triple {i:2d}: trace {tr:10.5f}  empirical {emp:10.5f} ± {se:.5f}  z {z:5.2f}  "
                     f"semi-orth gap {gap:.1e}  {'ok' if good else 'FAIL'}")
    return lines, ok


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedsto", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train every seed and write metrics, checkpoints and a summary")
    r.add_argument("config")
    c = sub.add_parser("comm-report", help="upload cost table for the configured schedule")
    c.add_argument("config")
    e = sub.add_parser("eval", help="per-domain mAP of a checkpoint on the config's test sets")
    e.add_argument("checkpoint")
    e.add_argument("config")
    t = sub.add_parser("theory-check", help="Monte-Carlo check of the trace penalty identity")
    t.add_argument("config")
    for p in (r, c, e, t):
        p.add_argument("--output", help="output directory (overrides run.output)")
        p.add_argument("--seeds", help="comma separated seeds (overrides run.seeds)")
    return ap


def _load(args) -> Config:
    cfg = load_config(args.config)
    run = {}
    if args.output:
        run["output"] = args.output
    if args.seeds:
        try:
            run["seeds"] = tuple(int(s) for s in args.seeds.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"--seeds: cannot parse {args.seeds!r}") from None
    return cfg.with_updates(run=run) if run else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            out = run_experiment(cfg)
            print((out / "summary.txt").read_text(), end="")
            print(f"artifacts written to {out}")
        elif args.command == "comm-report":
            table = comm_table(cfg)
            print(table.format())
            up = int(table.total * 10 ** 9)
            base = int(table.baseline_total * 10 ** 9)
            print(f"uploaded bytes: {up:,} (full-model baseline {base:,})")
        elif args.command == "eval":
            params = load_checkpoint(args.checkpoint)
            data = build_data(cfg, cfg.run.seeds[0])
            for dom in Domain:
                m50, m75 = evaluate_model(params, data.tests[dom], cfg.model, cfg.pseudo.conf_threshold,
                                          cfg.pseudo.nms_iou)
                print(f"{dom.value:9s} mAP@0.5 {m50:.4f}  mAP@0.75 {m75:.4f}")
        elif args.command == "theory-check":
            lines, ok = theory_check(cfg, cfg.run.seeds[0])
            print("\n".join(lines))
            print("all triples consistent" if ok else "identity check FAILED")
            return 0 if ok else 1
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
