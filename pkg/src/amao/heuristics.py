"""Insertion-pattern statistics from alignment traces, replayed as a
DP-free obfuscation heuristic.

For every legal boundary an aligner visited, we record which nop (if any)
was chosen there, keyed by (nop, boundary-position decile, target class).
Boundary positions are bucketed into deciles of each program's own boundary
list so patterns transfer across programs of different lengths; the raw
per-index table is also exported for figure-style inspection.  Frequencies
are per-opportunity, so over all nops they sum to at most 1 with the
remainder being the no-insert mass.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentTrace
from .baselines import ObfuscationBudget
from .isa import (
    DEFAULT_VOCAB,
    ByteProgram,
    DisplacementOverflowError,
    SemanticNop,
    find_insertion_points,
    insert_nops,
)

N_BUCKETS = 10


@dataclass(frozen=True)
class TraceRecord:
    """One alignment outcome: the trace, the attacked class, and the legal
    boundary list of the program it was computed for."""

    trace: AlignmentTrace
    label: int
    boundaries: tuple[int, ...]


def _bucket_of(position: int, n_boundaries: int) -> int:
    return min(N_BUCKETS - 1, (position * N_BUCKETS) // max(n_boundaries, 1))


@dataclass
class InsertionStats:
    # (nop, bucket, class) -> boundary-visits where this nop was chosen first
    events: Counter = field(default_factory=Counter)
    # (bucket, class) -> boundary-visits
    opportunities: Counter = field(default_factory=Counter)
    # (nop, index, class) -> raw insertion count at absolute boundary index
    raw_index: Counter = field(default_factory=Counter)
    nops: set = field(default_factory=set)
    classes: set = field(default_factory=set)

    def frequency(self, nop: str, bucket: int, label: int) -> float:
        opp = self.opportunities.get((bucket, label), 0)
        if opp == 0:
            return 0.0
        return self.events.get((nop, bucket, label), 0) / opp

    def bucket_distribution(self, bucket: int, label: int) -> list[tuple[str, float]]:
        return [(n, self.frequency(n, bucket, label)) for n in sorted(self.nops)]


def collect_stats(records: list[TraceRecord]) -> InsertionStats:
    """Accumulate insertion frequencies; pure and order-invariant."""
    stats = InsertionStats()
    for rec in records:
        stats.classes.add(rec.label)
        first_at: dict[int, str] = {}
        for d in rec.trace.decisions:
            if d.kind != "insert":
                continue
            stats.nops.add(d.nop.name)
            stats.raw_index[(d.nop.name, d.index, rec.label)] += 1
            if d.index not in first_at:
                first_at[d.index] = d.nop.name
        n = len(rec.boundaries)
        for pos, b in enumerate(sorted(rec.boundaries)):
            bucket = _bucket_of(pos, n)
            stats.opportunities[(bucket, rec.label)] += 1
            if b in first_at:
                stats.events[(first_at[b], bucket, rec.label)] += 1
    return stats


def uniform_stats(vocab: list[SemanticNop], classes: list[int], p_insert: float = 0.5) -> InsertionStats:
    """Degenerate stats: every nop equally likely at every boundary."""
    stats = InsertionStats()
    scale = 1000
    for label in classes:
        stats.classes.add(label)
        for bucket in range(N_BUCKETS):
            stats.opportunities[(bucket, label)] = scale * len(vocab)
            for nop in vocab:
                stats.nops.add(nop.name)
                stats.events[(nop.name, bucket, label)] = int(scale * p_insert)
    return stats


def heuristic_insert(prog: ByteProgram, stats: InsertionStats, label: int,
                     budget: ObfuscationBudget, seed: int,
                     vocab: list[SemanticNop] | tuple[SemanticNop, ...] = DEFAULT_VOCAB) -> ByteProgram:
    """Replay learned insertion frequencies over a program's boundaries.

    At each legal boundary, draw a nop (or nothing) from the class/decile
    frequency table until the byte budget runs out.  Overflowing insertions
    are dropped.  Output stays VM-equivalent to the input.
    """
    if not any(cls == label for _, cls in stats.opportunities):
        raise ValueError(f"no collected stats for class {label}")
    rng = np.random.default_rng(seed)
    by_name = {n.name: n for n in vocab}
    points = find_insertion_points(prog, vocab)
    spare = budget.spare_bytes(len(prog.text))
    chosen: list[tuple[int, SemanticNop]] = []
    n = len(points)
    for pos, b in enumerate(points):
        if spare <= 0:
            break
        bucket = _bucket_of(pos, n)
        r = float(rng.random())
        acc = 0.0
        for name in sorted(stats.nops):
            acc += stats.frequency(name, bucket, label)
            if r < acc:
                nop = by_name.get(name)
                if nop is not None and nop.length <= spare:
                    chosen.append((b, nop))
                    spare -= nop.length
                break
    while True:
        try:
            return insert_nops(prog, chosen)
        except DisplacementOverflowError:
            if not chosen:
                raise
            drop = int(rng.integers(0, len(chosen)))
            chosen.pop(drop)


# -- exports -------------------------------------------------------------------

def write_stats_csv(stats: InsertionStats, by_class_path: str, by_nop_path: str,
                    joint_path: str, raw_index_path: str | None = None) -> None:
    """Three grouped views (per class, per nop, joint) plus the raw
    per-boundary-index table."""
    classes = sorted(stats.classes)
    nops = sorted(stats.nops)

    with open(by_class_path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "bucket", "insert_frequency", "opportunities"])
        for label in classes:
            for bucket in range(N_BUCKETS):
                opp = stats.opportunities.get((bucket, label), 0)
                ev = sum(stats.events.get((n, bucket, label), 0) for n in nops)
                w.writerow([label, bucket, _fmt(ev / opp if opp else 0.0), opp])

    with open(by_nop_path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["nop", "bucket", "insert_frequency", "opportunities"])
        for nop in nops:
            for bucket in range(N_BUCKETS):
                opp = sum(stats.opportunities.get((bucket, c), 0) for c in classes)
                ev = sum(stats.events.get((nop, bucket, c), 0) for c in classes)
                w.writerow([nop, bucket, _fmt(ev / opp if opp else 0.0), opp])

    with open(joint_path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["nop", "class", "bucket", "frequency", "count"])
        for nop in nops:
            for label in classes:
                for bucket in range(N_BUCKETS):
                    count = stats.events.get((nop, bucket, label), 0)
                    w.writerow([nop, label, bucket, _fmt(stats.frequency(nop, bucket, label)), count])

    if raw_index_path:
        with open(raw_index_path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh)
            w.writerow(["nop", "boundary_index", "class", "count"])
            for (nop, index, label), count in sorted(stats.raw_index.items()):
                w.writerow([nop, index, label, count])


def _fmt(x: float) -> str:
    return f"{x:.6f}"
