"""Synthetic corpus generation and hex-dump ingestion.

Eight program families stand in for real malware classes.  Each family has a
characteristic instruction mix, an immediate-value byte band (so its images
occupy a distinct intensity range), and a fixed signature snippet (so byte
n-grams are discriminative).  Two families are deliberately dense in
nop-shaped bytes (push/pop pairs vs. lea/reg-moves), which gives insertion
attacks genuine directions to move samples between classes.

Every generated program assembles, reaches exactly one terminator, and runs
to completion within the step budget; generation is deterministic in the
seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .image import WidthPolicy, bytes_to_image
from .isa import ByteProgram, assemble, execute, validate_program
from .models.common import LabeledSample


class DataError(ValueError):
    """Bad external input (hex dumps, corpora, budgets)."""


BODY_REGS = ("eax", "ecx", "edx", "ebx", "ebp", "esi")  # edi = loop counter
EXEC_BUDGET = 50_000


@dataclass
class ClassTemplate:
    """Recipe for one synthetic class."""

    class_id: int
    name: str
    mix: dict[str, float]
    imm_band: tuple[int, int]  # inclusive byte range for imm32 bytes
    motif: str  # fixed assembly snippet, no branches
    motif_slot: float  # relative position of the motif in the body
    n_body: tuple[int, int] = (36, 60)
    loops: bool = False


def default_templates() -> list[ClassTemplate]:
    bands = [(10 + 26 * k, 50 + 26 * k) for k in range(8)]
    return [
        ClassTemplate(0, "pushstorm",
                      {"junk_pair": 5.0, "push_pop": 1.0, "mov_rr": 1.0, "mov_imm": 4.0},
                      bands[0],
                      "push eax\npush ecx\npush edx\npop edx\npop ecx\npop eax",
                      0.2),
        ClassTemplate(1, "leafield",
                      {"junk_self": 5.0, "lea": 2.0, "mov_rr": 1.0, "mov_imm": 4.0},
                      bands[1],
                      "lea eax, [ecx+16]\nlea ecx, [edx+32]\nlea edx, [ebx+48]",
                      0.5),
        ClassTemplate(2, "xorshuffle",
                      {"xor_rr": 4.0, "add_rr": 2.0, "mov_imm": 4.0, "mov_rr": 1.0},
                      bands[2],
                      "xor eax, ebx\nxor ebx, eax\nxor eax, ebx",
                      0.8),
        ClassTemplate(3, "cmpline",
                      {"cmp_imm": 3.0, "sub_imm": 3.0, "add_imm": 2.0, "mov_imm": 4.0},
                      bands[3],
                      "cmp eax, 11\ncmp ecx, 22\ncmp ebx, 33",
                      0.3, loops=True),
        ClassTemplate(4, "emitter",
                      {"emit": 4.0, "mov_rr": 2.0, "mov_imm": 4.0, "add_imm": 1.0},
                      bands[4],
                      "emit eax\nemit eax\nmov ebp, esi\nemit eax",
                      0.5),
        ClassTemplate(5, "stackmix",
                      {"push_pop": 3.0, "lea": 3.0, "mov_imm": 4.0, "mov_rr": 1.0},
                      bands[5],
                      "push ebx\nlea esi, [esi+8]\npop ebx\npush ebp\npop ebp",
                      0.7),
        ClassTemplate(6, "subchain",
                      {"sub_imm": 3.0, "add_imm": 3.0, "mov_imm": 4.0, "xor_rr": 1.0},
                      bands[6],
                      "sub eax, 7\nsub ecx, 9\nsub edx, 11",
                      0.4, loops=True),
        ClassTemplate(7, "movgrid",
                      {"mov_rr": 5.0, "mov_imm": 4.0, "lea": 1.0},
                      bands[7],
                      "mov esi, ebp\nmov ebp, esi\nmov ebx, edx\nmov edx, ebx",
                      0.6),
    ]


def _imm32_in_band(rng: np.random.Generator, band: tuple[int, int]) -> int:
    lo, hi = band
    parts = rng.integers(lo, hi + 1, size=4)
    return int(parts[0]) | int(parts[1]) << 8 | int(parts[2]) << 16 | int(parts[3]) << 24


def _body_instruction(kind: str, rng: np.random.Generator, band: tuple[int, int],
                      depth: list[int]) -> list[str]:
    pick = lambda: BODY_REGS[rng.integers(0, len(BODY_REGS))]
    if kind == "mov_imm":
        return [f"mov {pick()}, 0x{_imm32_in_band(rng, band):08x}"]
    if kind == "mov_rr":
        a, b = pick(), pick()
        return [f"mov {a}, {b}"]
    if kind == "lea":
        return [f"lea {pick()}, [{pick()}{int(rng.integers(-64, 65)):+d}]"]
    if kind == "add_rr":
        return [f"add {pick()}, {pick()}"]
    if kind == "xor_rr":
        return [f"xor {pick()}, {pick()}"]
    if kind == "add_imm":
        return [f"add {pick()}, {int(rng.integers(1, 32))}"]
    if kind == "sub_imm":
        return [f"sub {pick()}, {int(rng.integers(1, 32))}"]
    if kind == "cmp_imm":
        return [f"cmp {pick()}, {int(rng.integers(0, 64))}"]
    if kind == "emit":
        return ["emit eax"]
    if kind == "push_pop":
        if depth[0] > 0 and rng.random() < 0.5:
            depth[0] -= 1
            return [f"pop {pick()}"]
        depth[0] += 1
        return [f"push {pick()}"]
    if kind == "junk_pair":
        # machine-generated padding: push/pop of one register, back to back
        r = ("eax", "ecx", "edx", "ebx")[rng.integers(0, 4)]
        return [f"push {r}", f"pop {r}"]
    if kind == "junk_self":
        r = ("eax", "ecx", "edx", "ebx")[rng.integers(0, 4)]
        if rng.random() < 0.5:
            return [f"mov {r}, {r}"]
        return [f"lea {r}, [{r}+0]"]
    raise ValueError(f"unknown body kind {kind}")


def _sample_body(template: ClassTemplate, rng: np.random.Generator,
                 label_prefix: str) -> list[str]:
    kinds = sorted(template.mix)
    weights = np.array([template.mix[k] for k in kinds])
    weights = weights / weights.sum()
    n = int(rng.integers(template.n_body[0], template.n_body[1] + 1))
    depth = [0]
    lines: list[str] = []
    loop_done = False
    i = 0
    while i < n:
        if template.loops and not loop_done and rng.random() < 0.25 and i > 2:
            count = int(rng.integers(2, 5))
            # no push/pop in loop bodies: iteration count would unbalance the stack
            safe = [k for k in kinds if k != "push_pop"] or ["add_imm"]
            body_kind = str(rng.choice(safe))
            lines.append(f"mov edi, {count}")
            lines.append(f"{label_prefix}_loop:")
            lines.extend(_body_instruction(body_kind, rng, template.imm_band, depth))
            lines.append("sub edi, 1")
            lines.append(f"jnz {label_prefix}_loop")
            loop_done = True
            i += 4
            continue
        kind = str(rng.choice(kinds, p=weights))
        lines.extend(_body_instruction(kind, rng, template.imm_band, depth))
        i += 1
    while depth[0] > 0:
        lines.append(f"pop {BODY_REGS[rng.integers(0, len(BODY_REGS))]}")
        depth[0] -= 1
    return lines


def synth_program(template: ClassTemplate, rng: np.random.Generator) -> ByteProgram:
    """One program of the template's class: body mix + signature motif + ret."""
    for attempt in range(100):
        body = _sample_body(template, rng, f"c{template.class_id}")
        slot = int(round(template.motif_slot * len(body)))
        lines = body[:slot] + template.motif.splitlines() + body[slot:] + ["ret"]
        try:
            prog = assemble("\n".join(lines))
            validate_program(prog, require_terminator=True)
            execute(prog, budget=EXEC_BUDGET)
            return prog
        except Exception:
            continue
    raise DataError(f"template {template.name}: no valid program in 100 attempts")


def synth_corpus(templates: list[ClassTemplate], n_per_class: int, seed: int,
                 policy: WidthPolicy | None = None) -> list[LabeledSample]:
    """Deterministic labeled corpus: ``n_per_class`` programs per template."""
    if len(templates) < 2:
        raise DataError("need at least 2 class templates")
    policy = policy or WidthPolicy()
    samples: list[LabeledSample] = []
    for template in templates:
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, template.class_id, i])
            prog = synth_program(template, rng)
            samples.append(
                LabeledSample(
                    bytes=prog.text,
                    image=bytes_to_image(prog.text, policy),
                    label=template.class_id,
                    source=f"synth:{template.name}:{i}",
                )
            )
    return samples


def corpus_hash(samples: list[LabeledSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.label.to_bytes(2, "little"))
        h.update(len(s.bytes).to_bytes(4, "little"))
        h.update(s.bytes)
    return h.hexdigest()


def ingest_hexdump(path: str) -> bytes:
    """Parse an 'ADDRESS b0 b1 ... b15' hex dump; '??' bytes map to 0x00.

    Malformed lines raise DataError with the line number.
    """
    out = bytearray()
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) < 2:
                raise DataError(f"{path}:{lineno}: expected address plus bytes")
            addr = tokens[0]
            if len(addr) < 4 or any(c not in "0123456789abcdefABCDEF" for c in addr):
                raise DataError(f"{path}:{lineno}: bad address {addr!r}")
            for tok in tokens[1:]:
                if tok == "??":
                    out.append(0)
                elif len(tok) == 2 and all(c in "0123456789abcdefABCDEF" for c in tok):
                    out.append(int(tok, 16))
                else:
                    raise DataError(f"{path}:{lineno}: bad byte token {tok!r}")
    return bytes(out)


# -- generic random programs for property testing ----------------------------

_GENERIC_MIX = {
    "mov_imm": 2.0, "mov_rr": 2.0, "lea": 1.5, "add_rr": 1.0, "xor_rr": 1.0,
    "add_imm": 1.0, "sub_imm": 1.0, "cmp_imm": 1.0, "emit": 0.5, "push_pop": 1.5,
}


def random_program(rng: np.random.Generator, min_instr: int = 8, max_instr: int = 26,
                   blocks: int = 1, allow_loops: bool = True,
                   allow_cond: bool = True) -> ByteProgram:
    """A random always-terminating program, optionally multi-block.

    Multi-block layouts chain blocks with jmp (physical order == logical
    order) and end the last block with ret, so block-level transforms have
    material to permute.
    """
    template = ClassTemplate(
        0, "random", dict(_GENERIC_MIX), (0, 255), "", 0.0,
        n_body=(max(2, min_instr // max(blocks, 1)), max(3, max_instr // max(blocks, 1))),
        loops=allow_loops,
    )
    lines: list[str] = []
    for b in range(blocks):
        if b > 0:
            lines.append(f"blk{b}:")
        body = _sample_body(template, rng, f"b{b}")
        if allow_cond and len(body) > 4 and rng.random() < 0.4:
            # forward conditional hop over one side-effect-safe instruction
            # (skipping a push/pop or loop setup would corrupt control state)
            pos = int(rng.integers(1, len(body) - 2))
            skipped = body[pos]
            hoppable = (
                skipped.split(" ")[0] in ("mov", "lea", "add", "xor", "cmp", "emit")
                and not skipped.startswith(("mov edi", "sub edi"))
                and not body[pos + 1].endswith(":")
                and not body[pos - 1].endswith(":")
            )
            if hoppable:
                cond = "jz" if rng.random() < 0.5 else "jnz"
                body.insert(pos, f"{cond} b{b}skip{pos}")
                body.insert(pos + 2, f"b{b}skip{pos}:")
        lines.extend(body)
        if b < blocks - 1:
            lines.append(f"jmp blk{b + 1}")
        else:
            lines.append("ret")
    prog = assemble("\n".join(lines))
    validate_program(prog, require_terminator=True)
    execute(prog, budget=EXEC_BUDGET)
    return prog
