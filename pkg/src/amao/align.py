"""Alignment of an executable against a target byte string by nop insertion.

Given a program B2 and a (generally non-executable) target byte string B1,
choose semantic nops and insertion boundaries so that the spliced bytes of B2
match B1 as closely as possible under a distance metric.  The search is an
exact dynamic program over (target position, instructions placed); an
enumeration oracle (:func:`brute_force_align`) provides the independent
optimality check for small instances.

Distances compare tail-aligned sequences: when lengths differ the shorter
string is front-padded with zeros.  The DP folds that rule in exactly by
seeding column 0 with every feasible zero-pad prefix, so the reported optimum
is the true minimum over all achievable output lengths <= len(B1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .isa import ByteProgram, SemanticNop, disassemble, find_insertion_points, insert_nops

METRICS = ("bit", "byte_l0", "pixel_l2")

_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.int64)

_INF = float("inf")


class AlignmentError(ValueError):
    pass


class EnumerationBudgetError(RuntimeError):
    pass


def _pad_pair(a: bytes, b: bytes) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(a), len(b))
    xa = np.zeros(n, dtype=np.int64)
    xb = np.zeros(n, dtype=np.int64)
    if a:
        xa[n - len(a) :] = np.frombuffer(a, dtype=np.uint8)
    if b:
        xb[n - len(b) :] = np.frombuffer(b, dtype=np.uint8)
    return xa, xb


def distance(a: bytes, b: bytes, metric: str) -> float:
    """Distance between byte strings; the shorter is front-padded with zeros.

    bit: number of differing bits; byte_l0: number of differing bytes;
    pixel_l2: Euclidean distance over byte values.
    """
    xa, xb = _pad_pair(a, b)
    if metric == "bit":
        return int(_POPCOUNT[np.bitwise_xor(xa, xb)].sum())
    if metric == "byte_l0":
        return int((xa != xb).sum())
    if metric == "pixel_l2":
        d = xa - xb
        return float(math.sqrt(int((d * d).sum())))
    raise AlignmentError(f"unknown metric {metric!r}")


def linf_distance(a: bytes, b: bytes) -> int:
    """Max absolute per-byte difference (front-padded).  Not usable as an
    alignment metric: insertions of a matching byte never change it."""
    xa, xb = _pad_pair(a, b)
    return int(np.abs(xa - xb).max()) if len(xa) else 0


def _accumulated(a: bytes, b: bytes, metric: str) -> int:
    """Distance in the DP's additive domain (squared sum for pixel_l2)."""
    xa, xb = _pad_pair(a, b)
    if metric == "bit":
        return int(_POPCOUNT[np.bitwise_xor(xa, xb)].sum())
    if metric == "byte_l0":
        return int((xa != xb).sum())
    d = xa - xb
    return int((d * d).sum())


def _finalize(cost: int, metric: str) -> float:
    return float(math.sqrt(cost)) if metric == "pixel_l2" else cost


def _chunk_cost_vector(target: np.ndarray, chunk: bytes, metric: str) -> list[int]:
    """cost[i] of placing ``chunk`` at target positions [i, i+len)."""
    n, L = len(target), len(chunk)
    if L == 0 or L > n:
        return []
    total = np.zeros(n - L + 1, dtype=np.int64)
    for j, c in enumerate(chunk):
        window = target[j : n - L + 1 + j]
        if metric == "bit":
            total += _POPCOUNT[np.bitwise_xor(window, c)]
        elif metric == "byte_l0":
            total += window != c
        else:
            d = window - c
            total += d * d
    return total.tolist()


@dataclass
class AlignmentProblem:
    """One alignment instance: target B1, original program B2, legal
    boundaries, nop vocabulary, metric."""

    target: bytes
    original: ByteProgram
    boundaries: list[int]
    vocab: list[SemanticNop]
    metric: str = "pixel_l2"

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise AlignmentError(f"unknown metric {self.metric!r}")
        if len(self.target) < len(self.original.text):
            raise AlignmentError("target shorter than original")
        k = self.original.n_instructions
        if any(not 0 <= b <= k for b in self.boundaries):
            raise AlignmentError("boundary outside program")
        self.boundaries = sorted(set(self.boundaries))
        for nop in self.vocab:
            disassemble(nop.encoding)  # must decode under the subset

    @property
    def room(self) -> int:
        return len(self.target) - len(self.original.text)


def make_problem(
    prog: ByteProgram,
    target: bytes,
    vocab: list[SemanticNop],
    metric: str = "pixel_l2",
) -> AlignmentProblem:
    """Build a problem whose boundaries keep every encoding byte-stable under
    insertion (no boundary inside a branch span), so modeled bytes equal the
    reassembled program's bytes exactly."""
    boundaries = find_insertion_points(prog, vocab, exclude_branch_spans=True)
    return AlignmentProblem(target, prog, boundaries, list(vocab), metric)


@dataclass(frozen=True)
class Decision:
    """One trace step: match the next instruction, or insert a nop at a
    boundary."""

    kind: str  # "match" | "insert"
    index: int  # instruction index for match, boundary for insert
    nop: SemanticNop | None = None


@dataclass
class AlignmentTrace:
    decisions: list[Decision]
    total_cost: float
    achieved_length: int
    metric: str

    def insertions(self) -> list[tuple[int, SemanticNop]]:
        return [(d.index, d.nop) for d in self.decisions if d.kind == "insert"]

    def inserted_bytes(self) -> int:
        return sum(d.nop.length for d in self.decisions if d.kind == "insert")

    def to_lines(self) -> list[str]:
        out = []
        for d in self.decisions:
            if d.kind == "match":
                out.append(f"MAT {d.index}")
            else:
                out.append(f"INS {d.index} {d.nop.name}")
        return out


def trace_from_lines(lines: list[str], vocab: list[SemanticNop], metric: str = "pixel_l2") -> AlignmentTrace:
    by_name = {n.name: n for n in vocab}
    decisions = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "MAT" and len(parts) == 2:
            decisions.append(Decision("match", int(parts[1])))
        elif parts[0] == "INS" and len(parts) == 3:
            if parts[2] not in by_name:
                raise AlignmentError(f"line {lineno}: unknown nop {parts[2]!r}")
            decisions.append(Decision("insert", int(parts[1]), by_name[parts[2]]))
        else:
            raise AlignmentError(f"line {lineno}: bad trace record {line!r}")
    return AlignmentTrace(decisions, total_cost=float("nan"), achieved_length=-1, metric=metric)


@dataclass
class DPTable:
    """Memoized costs: cost[i][k] = best accumulated cost producing the first
    i target positions with k instructions placed (inf where unreachable).
    States with more instruction bytes than target positions are never
    reachable, giving the table its triangular structure."""

    cost: list[list[float]]
    back: list[list[tuple | None]]
    terminal_cost: float


def replay_bytes(prog: ByteProgram, trace: AlignmentTrace) -> bytes:
    """Bytes the trace models: unit encodings and nop encodings spliced in
    decision order (no reassembly)."""
    out = bytearray()
    next_match = 0
    for d in trace.decisions:
        if d.kind == "match":
            if d.index != next_match:
                raise AlignmentError(f"trace matches instruction {d.index}, expected {next_match}")
            out += prog.instructions[d.index].encoding
            next_match += 1
        else:
            out += d.nop.encoding
    if next_match != prog.n_instructions:
        raise AlignmentError("trace does not cover all instructions")
    return bytes(out)


def align(problem: AlignmentProblem) -> tuple[DPTable, AlignmentTrace]:
    """Minimum-cost insertion trace for ``problem``.

    Ties prefer matching over inserting, then lower vocabulary index.  The
    trace's total cost equals the table's terminal cost and, because problem
    boundaries are span-free, equals the true distance of the spliced bytes
    (front-padded) from the target.
    """
    prog = problem.original
    target = np.frombuffer(problem.target, dtype=np.uint8).astype(np.int64)
    n = len(target)
    units = [ins.encoding for ins in prog.instructions]
    K = len(units)
    suffix = [0] * (K + 1)
    for k in range(K - 1, -1, -1):
        suffix[k] = suffix[k + 1] + len(units[k])
    m = suffix[0]

    unit_cost = [_chunk_cost_vector(target, u, problem.metric) for u in units]
    nop_cost = [_chunk_cost_vector(target, v.encoding, problem.metric) for v in problem.vocab]
    nop_len = [v.length for v in problem.vocab]
    boundary_set = set(problem.boundaries)

    cost = [[_INF] * (K + 1) for _ in range(n + 1)]
    back: list[list[tuple | None]] = [[None] * (K + 1) for _ in range(n + 1)]

    zero_pad = _chunk_cost_vector(target, b"\x00", problem.metric)
    acc = 0
    cost[0][0] = 0
    back[0][0] = ("pad",)
    for s in range(1, n - m + 1):
        acc += zero_pad[s - 1]
        cost[s][0] = acc
        back[s][0] = ("pad",)

    for k in range(K + 1):
        col = [cost[i][k] for i in range(n + 1)]
        if k in boundary_set and problem.vocab:
            for i in range(n + 1):
                ci = col[i]
                if ci == _INF:
                    continue
                for v in range(len(problem.vocab)):
                    L = nop_len[v]
                    j = i + L
                    if j + suffix[k] > n:
                        continue
                    new = ci + nop_cost[v][i]
                    if new < col[j]:
                        col[j] = new
                        back[j][k] = ("insert", i, v)
            for i in range(n + 1):
                cost[i][k] = col[i]
        if k < K:
            L = len(units[k])
            uc = unit_cost[k]
            nxt = cost
            for i in range(n + 1):
                ci = col[i]
                if ci == _INF:
                    continue
                j = i + L
                if j + suffix[k + 1] > n:
                    continue
                new = ci + uc[i]
                if new < nxt[j][k + 1]:
                    nxt[j][k + 1] = new
                    back[j][k + 1] = ("match", i)

    terminal = cost[n][K]
    if terminal == _INF:  # pragma: no cover - all-match path always fits
        raise AlignmentError("no feasible alignment")

    decisions: list[Decision] = []
    i, k = n, K
    while True:
        bp = back[i][k]
        if bp is None:
            raise AlignmentError("broken backpointer chain")
        if bp[0] == "pad":
            pad = i
            break
        if bp[0] == "match":
            k -= 1
            decisions.append(Decision("match", k))
            i = bp[1]
        else:
            decisions.append(Decision("insert", k, problem.vocab[bp[2]]))
            i = bp[1]
    decisions.reverse()

    trace = AlignmentTrace(
        decisions=decisions,
        total_cost=_finalize(terminal, problem.metric),
        achieved_length=n - pad,
        metric=problem.metric,
    )
    table = DPTable(cost=cost, back=back, terminal_cost=_finalize(terminal, problem.metric))
    return table, trace


def brute_force_align(problem: AlignmentProblem, cap: int | None = None, budget: int = 10_000_000) -> tuple[float, AlignmentTrace]:
    """Exact minimum by enumerating every legal insertion assignment.

    ``cap`` bounds total inserted bytes (defaults to the problem's room).
    Costs are true front-padded distances of the spliced bytes; raises
    EnumerationBudgetError past ``budget`` candidates.
    """
    prog = problem.original
    room = problem.room if cap is None else min(cap, problem.room)
    bounds = sorted(problem.boundaries)
    K = prog.n_instructions
    count = 0
    best: list = [None, None]  # [cost, insertion map]

    def evaluate(chosen: dict[int, list[SemanticNop]]) -> None:
        nonlocal count
        count += 1
        if count > budget:
            raise EnumerationBudgetError(f"enumeration exceeded {budget} candidates")
        out = bytearray()
        for b in range(K + 1):
            for nop in chosen.get(b, ()):
                out += nop.encoding
            if b < K:
                out += prog.instructions[b].encoding
        c = _accumulated(problem.target, bytes(out), problem.metric)
        if best[0] is None or c < best[0]:
            best[0] = c
            best[1] = {b: list(seq) for b, seq in chosen.items()}

    chosen: dict[int, list[SemanticNop]] = {}

    def rec(bi: int, room_left: int) -> None:
        if bi == len(bounds):
            evaluate(chosen)
            return
        b = bounds[bi]
        rec(bi + 1, room_left)
        for nop in problem.vocab:
            if nop.length <= room_left:
                chosen.setdefault(b, []).append(nop)
                rec(bi, room_left - nop.length)
                chosen[b].pop()
                if not chosen[b]:
                    del chosen[b]

    rec(0, room)

    insertion_map = best[1] or {}
    decisions: list[Decision] = []
    for b in range(K + 1):
        for nop in insertion_map.get(b, ()):
            decisions.append(Decision("insert", b, nop))
        if b < K:
            decisions.append(Decision("match", b))
    achieved = len(prog.text) + sum(n.length for seq in insertion_map.values() for n in seq)
    trace = AlignmentTrace(decisions, _finalize(best[0], problem.metric), achieved, problem.metric)
    return trace.total_cost, trace


def apply_trace(prog: ByteProgram, trace: AlignmentTrace) -> ByteProgram:
    """Splice the trace's nops into the program and reassemble.

    The output disassembles to the original instructions interleaved with
    vocabulary nops and is execution-equivalent to the input.
    """
    next_match = 0
    for d in trace.decisions:
        if d.kind == "match":
            if d.index != next_match:
                raise AlignmentError(f"trace matches instruction {d.index}, expected {next_match}")
            next_match += 1
        elif not next_match <= d.index <= prog.n_instructions:
            raise AlignmentError(f"insert at boundary {d.index} out of order")
    if next_match != prog.n_instructions:
        raise AlignmentError("trace does not cover all instructions")
    return insert_nops(prog, trace.insertions())
