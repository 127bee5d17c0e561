"""Comparison obfuscators: random nop insertion, payload append, subroutine
reordering, control-flow mixing, instruction substitution.

All transforms except payload_append return real programs and preserve
observable behavior (checked by the VM in the test suite); payload_append
returns a raw byte string whose appended region sits after the terminator and
never executes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .isa import (
    BRANCH_MNEMONICS,
    MASK32,
    REG_NUM,
    TERMINATORS,
    ByteProgram,
    DisplacementOverflowError,
    Entry,
    SemanticNop,
    _assemble_entries,
    find_insertion_points,
    insert_nops,
    program_to_entries,
    successors,
    validate_program,
)


class ObfuscationError(ValueError):
    pass


@dataclass(frozen=True)
class ObfuscationBudget:
    """Size cap: output text length <= max_growth * input text length."""

    max_growth: float = 1.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_growth < 1.0:
            raise ObfuscationError("max_growth must be >= 1")

    def spare_bytes(self, text_len: int) -> int:
        return int(text_len * self.max_growth) - text_len


def random_nop_insert(prog: ByteProgram, vocab: list[SemanticNop],
                      budget: ObfuscationBudget) -> ByteProgram:
    """Uniformly random legal (boundary, nop) insertions until the budget is
    spent.  Legality is re-checked as the program grows, so accumulated
    insertions can never overflow a branch."""
    rng = np.random.default_rng(budget.seed)
    spare = budget.spare_bytes(len(prog.text))
    current = prog
    while True:
        fits = [n for n in vocab if n.length <= spare]
        if not fits:
            return current
        points = find_insertion_points(current, fits)
        if not points:
            return current
        boundary = int(points[rng.integers(0, len(points))])
        nop = fits[rng.integers(0, len(fits))]
        try:
            current = insert_nops(current, [(boundary, nop)])
        except DisplacementOverflowError:
            continue
        spare -= nop.length


def payload_append(prog: ByteProgram, adv_bytes: bytes, budget: ObfuscationBudget) -> bytes:
    """Append adversarial bytes after the terminator.  The result is a byte
    string, not a program: the appended region is never executed and need not
    decode."""
    spare = budget.spare_bytes(len(prog.text))
    if len(adv_bytes) > spare:
        raise ObfuscationError(
            f"payload of {len(adv_bytes)} bytes exceeds budget of {spare}")
    return prog.text + adv_bytes


def _blocks(prog: ByteProgram) -> list[tuple[int, int]]:
    """Label-delimited blocks as (start, end) index ranges.

    A cut happens at a labeled instruction whose predecessor cannot fall
    through (ret/jmp/hlt); every block must then end in ret/jmp/hlt or the
    program is not partitionable."""
    labeled = set(prog.labels.values())
    for i, ins in enumerate(prog.instructions):
        if ins.mnemonic in BRANCH_MNEMONICS:
            labeled.add(prog.branch_target_index(i))
    cuts = [0]
    for i in sorted(labeled):
        if 0 < i < prog.n_instructions:
            prev = prog.instructions[i - 1].mnemonic
            if prev == "jmp" or prev in TERMINATORS:
                cuts.append(i)
    cuts.append(prog.n_instructions)
    blocks = []
    for a, b in zip(cuts, cuts[1:]):
        if a == b:
            continue
        last = prog.instructions[b - 1].mnemonic
        if last != "jmp" and last not in TERMINATORS:
            raise ObfuscationError(f"block at {a}..{b} falls through; cannot partition")
        blocks.append((a, b))
    return blocks


def subroutine_reorder(prog: ByteProgram, seed: int) -> ByteProgram:
    """Permute label-delimited blocks (entry block stays first); labels are
    re-resolved by reassembly.  Falls back to the identity permutation when
    no displacement-safe layout exists."""
    blocks = _blocks(prog)
    if len(blocks) <= 2:
        return prog
    entries = program_to_entries(prog)
    # entry index -> position in the entry list of its first label/instr
    positions = []
    idx = 0
    starts = {a for a, _ in blocks}
    for pos, entry in enumerate(entries):
        if entry[0] == "instr":
            if idx in starts:
                positions.append((idx, pos))
            idx += 1
    first_entry_pos = {i: p for i, p in positions}

    def entry_slice(block: tuple[int, int]) -> list[Entry]:
        a, b = block
        start = first_entry_pos[a]
        # back up over labels attached to the block head
        while start > 0 and entries[start - 1][0] == "label":
            start -= 1
        end = start
        count = 0
        while count < b - a:
            if entries[end][0] == "instr":
                count += 1
            end += 1
        return entries[start:end]

    rng = np.random.default_rng(seed)
    rest = list(range(1, len(blocks)))
    for _ in range(10):
        perm = [0] + [rest[i] for i in rng.permutation(len(rest))]
        out: list[Entry] = []
        for bi in perm:
            out.extend(entry_slice(blocks[bi]))
        try:
            reordered = _assemble_entries(out)
            validate_program(reordered, require_terminator=True)
            return reordered
        except DisplacementOverflowError:
            continue
    return prog


def mix_control_flow(prog: ByteProgram, seed: int, budget: ObfuscationBudget) -> ByteProgram:
    """Split straight-line regions and permute them physically, chaining the
    logical order back together with jmp instructions.

    Regions whose relocation would overflow a rel8 displacement are merged
    back (per-region fallback); the identity program is the last resort.
    """
    rng = np.random.default_rng(seed)
    entries = program_to_entries(prog)
    # split points: between instructions, not inside existing branch spans
    safe = set(find_insertion_points(prog, [], exclude_branch_spans=True))
    spare = budget.spare_bytes(len(prog.text))
    max_regions = max(1, spare // 2)  # every region may cost one 2-byte jmp
    if max_regions <= 1 or prog.n_instructions < 3:
        return prog
    candidates = sorted(b for b in safe if 0 < b < prog.n_instructions)
    if not candidates:
        return prog
    # cut as finely as the jmp budget allows (heavier mixing, more jmps)
    hi = min(len(candidates), max_regions - 1)
    lo = max(1, (2 * hi) // 3)
    n_cuts = int(rng.integers(lo, hi + 1))
    cuts = sorted(int(c) for c in rng.choice(candidates, size=n_cuts, replace=False))

    # build per-region entry lists
    regions: list[list[Entry]] = []
    bounds = [0] + cuts + [prog.n_instructions]
    idx = 0
    current: list[Entry] = []
    cut_set = set(cuts)
    for entry in entries:
        if entry[0] == "instr":
            if idx in cut_set:
                regions.append(current)
                current = []
            current.append(entry)
            idx += 1
        else:
            if idx in cut_set:
                regions.append(current)
                current = []
                cut_set.discard(idx)
            current.append(entry)
    regions.append(current)

    for attempt in range(10):
        order = [int(v) for v in rng.permutation(len(regions))]
        if order == list(range(len(regions))):
            continue
        out: list[Entry] = []
        region_label = {ri: f"__r{ri}" for ri in range(len(regions))}
        out.append(("instr", "jmp", (region_label[0],)))
        for pos, ri in enumerate(order):
            out.append(("label", region_label[ri]))
            out.extend(regions[ri])
            last = regions[ri][-1]
            ends_flow = last[0] == "instr" and (last[1] == "jmp" or last[1] in TERMINATORS)
            if not ends_flow:
                if ri + 1 < len(regions):
                    out.append(("instr", "jmp", (region_label[ri + 1],)))
                # final region falls to program end: nothing to chain
        try:
            mixed = _assemble_entries(out)
            validate_program(mixed, require_terminator=True)
            if len(mixed.text) <= int(len(prog.text) * budget.max_growth):
                return mixed
        except DisplacementOverflowError:
            continue
    return prog


# -- instruction substitution -------------------------------------------------

def _zf_live_out(prog: ByteProgram) -> list[bool]:
    """Backward may-liveness of ZF per instruction; the end state observes ZF,
    so terminators keep it live."""
    n = prog.n_instructions
    live_in = [False] * n
    live_out = [False] * n
    changed = True
    while changed:
        changed = False
        for i in range(n - 1, -1, -1):
            ins = prog.instructions[i]
            if ins.mnemonic in TERMINATORS:
                out = True  # halting exposes ZF
            else:
                out = any(live_in[s] for s in successors(prog, i) if s < n)
            if ins.mnemonic in ("jz", "jnz"):
                inn = True
            elif ins.mnemonic in ("add", "sub", "cmp") or (
                ins.mnemonic == "xor"
            ):
                inn = False  # writes ZF
            else:
                inn = out
            if out != live_out[i] or inn != live_in[i]:
                live_out[i], live_in[i] = out, inn
                changed = True
    return live_out


def solve_value_triple(imm: int, rng: np.random.Generator,
                       m: int | None = None, a: int | None = None) -> tuple[int, int, int]:
    """(m, a, x) with ((m + a) mod 2^32) ^ x == imm and a in imm8 range."""
    m = int(rng.integers(0, 1 << 32)) if m is None else m
    a = int(rng.integers(1, 0x60)) if a is None else a
    x = ((m + a) & MASK32) ^ (imm & MASK32)
    return m, a, x


def instruction_substitute(prog: ByteProgram, seed: int, budget: ObfuscationBudget,
                           p: float = 0.5) -> ByteProgram:
    """Rewrite instructions into equivalent longer forms.

    mov r, imm32  ->  mov r, m; add r, a; xor r, x   (static value hiding,
    applied only where ZF is dead afterwards, since xor writes ZF)
    add r1, r2    ->  push s; mov s, R; add r1, s; add r1, r2;
                      mov s, -R; add r1, s; pop s    (random-bias addition;
    the final add leaves ZF exactly as the original did)
    """
    rng = np.random.default_rng(seed)
    spare = budget.spare_bytes(len(prog.text))
    zf_live = _zf_live_out(prog)
    out: list[Entry] = []
    idx = 0
    for entry in program_to_entries(prog):
        if entry[0] == "label":
            out.append(entry)
            continue
        _, mnemonic, operands = entry
        i = idx
        idx += 1
        if (
            mnemonic == "mov"
            and isinstance(operands[1], int)
            and operands[0] != "esp"
            and not zf_live[i]
            and spare >= 9
            and rng.random() < p
        ):
            r = operands[0]
            m, a, x = solve_value_triple(operands[1], rng)
            out.append(("instr", "mov", (r, m)))
            out.append(("instr", "add", (r, a)))
            out.append(("instr", "xor", (r, x)))
            spare -= 9
            continue
        if (
            mnemonic == "add"
            and len(operands) == 2
            and operands[1] in REG_NUM
            and operands[0] != operands[1]
            and "esp" not in operands
            and spare >= 16
            and rng.random() < p
        ):
            dst, src = operands
            scratch = next(r for r in ("eax", "ecx", "edx", "ebx", "ebp", "esi")
                           if r not in (dst, src))
            r_val = int(rng.integers(0, 1 << 32))
            out.append(("instr", "push", (scratch,)))
            out.append(("instr", "mov", (scratch, r_val)))
            out.append(("instr", "add", (dst, scratch)))
            out.append(("instr", "add", (dst, src)))
            out.append(("instr", "mov", (scratch, (-r_val) & MASK32)))
            out.append(("instr", "add", (dst, scratch)))
            out.append(("instr", "pop", (scratch,)))
            spare -= 16
            continue
        out.append(entry)
    return _assemble_entries(out)
