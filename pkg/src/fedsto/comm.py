"""Communication ledger and cost table.

Sizes are integer bytes; 1 MB = 10**6 B and 1 GB = 1000 MB. Table figures use
Decimal arithmetic and round half-up only when formatted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

UP, DOWN = "up", "down"
PHASES = ("warmup", "phase1", "phase2")


@dataclass(frozen=True)
class Record:
    round: int
    client: int
    direction: str
    scope: str
    bytes: int
    phase: str


@dataclass
class CommLedger:
    records: list[Record] = field(default_factory=list)

    def add(self, round_idx: int, client: int, direction: str, scope: str, nbytes: int, phase: str) -> None:
        if direction not in (UP, DOWN):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        if self.records and round_idx < self.records[-1].round:
            raise ValueError("ledger is append-only in round order")
        self.records.append(Record(round_idx, client, direction, scope, int(nbytes), phase))

    def __len__(self):
        return len(self.records)

    def total(self, direction: str = UP, phase: str | None = None, round_idx: int | None = None,
              client: int | None = None) -> int:
        return sum(r.bytes for r in self.records
                   if r.direction == direction and (phase is None or r.phase == phase)
                   and (round_idx is None or r.round == round_idx) and (client is None or r.client == client))

    def count(self, direction: str = UP, phase: str | None = None) -> int:
        return sum(1 for r in self.records if r.direction == direction and (phase is None or r.phase == phase))


def mb_to_bytes(mb) -> int:
    return int(Decimal(str(mb)) * 10 ** 6)


def sampled_count(num_clients: int, ratio: float) -> int:
    return max(1, round(ratio * num_clients))


def plan_ledger(num_clients: int, ratio: float, rounds: dict[str, int], sizes: dict[str, int],
                phase1_scope: str = "backbone") -> CommLedger:
    """Ledger a run of this shape would write, without training anything.

    Uses the first ``ratio * M`` client ids each round; which ids are sampled
    does not change any byte count.
    """
    ledger = CommLedger()
    n = sampled_count(num_clients, ratio)
    t = rounds.get("warmup", 0)
    for phase, scope in (("phase1", phase1_scope), ("phase2", "all")):
        for _ in range(rounds.get(phase, 0)):
            for k in range(n):
                ledger.add(t, k, DOWN, "all", sizes["all"], phase)
                ledger.add(t, k, UP, scope, sizes[scope], phase)
            t += 1
    return ledger


@dataclass(frozen=True)
class CostTable:
    per_phase: dict[str, Decimal]   # GB uploaded per phase
    total: Decimal
    baseline_per_phase: dict[str, Decimal]
    baseline_total: Decimal
    reduction: Decimal | None      # percent; None when the baseline is empty

    def rows(self) -> list[tuple[str, list[str]]]:
        return [("FedAvg (full model)", [fmt_gb(self.baseline_per_phase[p]) for p in PHASES]
                 + [fmt_gb(self.baseline_total), "-"]),
                ("FedSTO", [fmt_gb(self.per_phase[p]) for p in PHASES]
                 + [fmt_gb(self.total), fmt_pct(self.reduction)])]

    def format(self) -> str:
        header = ["Method", "Warm-up", "Phase 1", "Phase 2", "Total", "Reduction"]
        body = [[name] + cells for name, cells in self.rows()]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in [header] + body]
        return "\n".join(lines)


def _gb(nbytes: int) -> Decimal:
    return Decimal(nbytes) / Decimal(10 ** 9)


def fmt_gb(gb: Decimal) -> str:
    q = gb.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q:,.2f} GB"


def fmt_pct(p: Decimal | None) -> str:
    if p is None:
        return "n/a"
    return f"{p.quantize(Decimal('0.01'), rounding=ROUND_HALF_UP)} %"


def comm_report(ledger: CommLedger, model_sizes: dict[str, int]) -> CostTable:
    """Upload totals per phase against a baseline that ships the full model every upload."""
    full = model_sizes["all"]
    per_phase = {p: _gb(ledger.total(UP, p)) for p in PHASES}
    base = {p: _gb(ledger.count(UP, p) * full) for p in PHASES}
    total = sum(per_phase.values(), Decimal(0))
    base_total = sum(base.values(), Decimal(0))
    reduction = None if base_total == 0 else (1 - total / base_total) * 100
    return CostTable(per_phase, total, base, base_total, reduction)
