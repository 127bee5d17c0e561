"""A small x86-flavored 32-bit instruction subset with assembler, linear-sweep
disassembler, and interpreter.

The subset is closed and bit-exact: every mnemonic has one fixed encoding,
``decode(encode(i)) == i``, and the interpreter gives every instruction a
deterministic meaning, so "this rewrite preserves behavior" is something we
*run and check*, never assume.  Registers follow x86 numbering
(eax ecx edx ebx esp ebp esi edi); the only flag is ZF.

Encodings (dst/src are 3-bit register numbers):

    nop                 90
    xchg ax, ax         66 90              (treated as a plain 2-byte nop)
    mov r32, imm32      B8+r  imm32(LE)
    mov r32, r32        89  C0|src<<3|dst
    add r32, r32        01  C0|src<<3|dst
    xor r32, r32        31  C0|src<<3|dst
    xchg r32, r32       87  C0|src<<3|dst
    add r32, imm8       83  C0+r  ib       (imm8 sign-extended)
    sub r32, imm8       83  E8+r  ib
    cmp r32, imm8       83  F8+r  ib
    xor r32, imm32      81  F0+r  imm32(LE)
    lea r32, [r32+d8]   8D  40|reg<<3|rm  disp8
    push r32            50+r
    pop r32             58+r
    jmp rel8            EB  cb
    jz rel8             74  cb
    jnz rel8            75  cb
    ret                 C3
    hlt                 F4
    emit eax            E7 00              (appends eax to the output stream)

lea decodes the ModRM r/m field as a plain register number (no SIB byte);
``ret`` terminates execution (there is no call, so every ret is top-level).
Memory below the stack pointer is scratch: state comparisons look at
registers, ZF, the output stream, and bytes at addresses >= esp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REGS = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
REG_NUM = {name: i for i, name in enumerate(REGS)}
MASK32 = 0xFFFFFFFF
MEM_SIZE = 0x10000

BRANCH_MNEMONICS = ("jmp", "jz", "jnz")
TERMINATORS = ("ret", "hlt")
# Instructions that write ZF / read ZF; everything else leaves it alone.
ZF_WRITERS = ("add", "sub", "cmp", "xor")
ZF_READERS = ("jz", "jnz")


class AssemblyError(ValueError):
    """Base class for assembler failures."""


class UnknownMnemonicError(AssemblyError):
    pass


class UnresolvedLabelError(AssemblyError):
    pass


class DisplacementOverflowError(AssemblyError):
    pass


class ProgramError(ValueError):
    """A byte program violating structural invariants (targets, terminator)."""


class DecodeError(ValueError):
    """Linear-sweep decode failure; carries the offset and the partial result."""

    def __init__(self, offset: int, message: str, partial: list["Instruction"] | None = None):
        super().__init__(f"decode error at offset {offset}: {message}")
        self.offset = offset
        self.partial = partial if partial is not None else []


class VMError(RuntimeError):
    pass


class BudgetExhaustedError(VMError):
    def __init__(self, steps: int):
        super().__init__(f"non-termination within budget ({steps} steps)")
        self.steps = steps


class WildJumpError(VMError):
    def __init__(self, pc: int):
        super().__init__(f"wild jump: pc 0x{pc:x} is not an instruction boundary")
        self.pc = pc


class StackFaultError(VMError):
    pass


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction: mnemonic, canonical operands, exact bytes.

    Branch operands are the signed rel8 displacement (relative to the end of
    the instruction); symbolic labels live in :class:`ByteProgram`.
    """

    mnemonic: str
    operands: tuple
    encoding: bytes
    offset: int = 0

    @property
    def length(self) -> int:
        return len(self.encoding)

    def at(self, offset: int) -> "Instruction":
        return Instruction(self.mnemonic, self.operands, self.encoding, offset)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _reg(name) -> int:
    if name not in REG_NUM:
        raise AssemblyError(f"unknown register {name!r}")
    return REG_NUM[name]


def _imm8_signed(value: int) -> int:
    # canonicalize 0..255 / -128..127 inputs to signed two's complement
    if not -128 <= value <= 255:
        raise AssemblyError(f"immediate {value} does not fit in 8 bits")
    return ((value + 128) % 256) - 128


def encode_instruction(mnemonic: str, operands: tuple) -> bytes:
    """Encode one instruction; branch operands must already be numeric rel8."""
    m = mnemonic
    if m == "nop":
        return b"\x90"
    if m == "xchg" and operands == ("ax", "ax"):
        return b"\x66\x90"
    if m == "mov" and isinstance(operands[1], int):
        return bytes([0xB8 + _reg(operands[0])]) + (operands[1] & MASK32).to_bytes(4, "little")
    if m in ("mov", "add", "xor", "xchg") and len(operands) == 2 and operands[1] in REG_NUM:
        op = {"mov": 0x89, "add": 0x01, "xor": 0x31, "xchg": 0x87}[m]
        dst, src = _reg(operands[0]), _reg(operands[1])
        return bytes([op, 0xC0 | (src << 3) | dst])
    if m in ("add", "sub", "cmp") and len(operands) == 2 and isinstance(operands[1], int):
        base = {"add": 0xC0, "sub": 0xE8, "cmp": 0xF8}[m]
        imm = _imm8_signed(operands[1])
        return bytes([0x83, base + _reg(operands[0]), imm & 0xFF])
    if m == "xor" and len(operands) == 2 and isinstance(operands[1], int):
        return bytes([0x81, 0xF0 + _reg(operands[0])]) + (operands[1] & MASK32).to_bytes(4, "little")
    if m == "lea":
        dst, base_reg, disp = operands
        if not -128 <= disp <= 127:
            raise AssemblyError(f"lea displacement {disp} does not fit in 8 bits")
        return bytes([0x8D, 0x40 | (_reg(dst) << 3) | _reg(base_reg), disp & 0xFF])
    if m == "push":
        return bytes([0x50 + _reg(operands[0])])
    if m == "pop":
        return bytes([0x58 + _reg(operands[0])])
    if m in BRANCH_MNEMONICS:
        disp = operands[0]
        if not -128 <= disp <= 127:
            raise DisplacementOverflowError(f"rel8 displacement {disp} out of range")
        op = {"jmp": 0xEB, "jz": 0x74, "jnz": 0x75}[m]
        return bytes([op, disp & 0xFF])
    if m == "ret":
        return b"\xc3"
    if m == "hlt":
        return b"\xf4"
    if m == "emit":
        if operands != ("eax",):
            raise AssemblyError("emit takes eax only")
        return b"\xe7\x00"
    raise UnknownMnemonicError(f"unknown mnemonic/operand form: {m} {operands!r}")


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _decode_one(data: bytes, off: int) -> Instruction:
    """Decode a single instruction starting at ``off``; raises DecodeError."""

    def need(n: int) -> None:
        if off + n > len(data):
            raise DecodeError(off, "truncated instruction")

    b0 = data[off]
    if b0 == 0x90:
        return Instruction("nop", (), b"\x90", off)
    if b0 == 0x66:
        need(2)
        if data[off + 1] != 0x90:
            raise DecodeError(off, f"unknown 66-prefixed opcode 0x{data[off + 1]:02x}")
        return Instruction("xchg", ("ax", "ax"), b"\x66\x90", off)
    if 0xB8 <= b0 <= 0xBF:
        need(5)
        imm = int.from_bytes(data[off + 1 : off + 5], "little")
        return Instruction("mov", (REGS[b0 - 0xB8], imm), bytes(data[off : off + 5]), off)
    if b0 in (0x89, 0x01, 0x31, 0x87):
        need(2)
        modrm = data[off + 1]
        if modrm < 0xC0:
            raise DecodeError(off, f"non-register ModRM 0x{modrm:02x}")
        m = {0x89: "mov", 0x01: "add", 0x31: "xor", 0x87: "xchg"}[b0]
        src, dst = (modrm >> 3) & 7, modrm & 7
        return Instruction(m, (REGS[dst], REGS[src]), bytes(data[off : off + 2]), off)
    if b0 == 0x83:
        need(3)
        modrm = data[off + 1]
        if modrm < 0xC0:
            raise DecodeError(off, f"non-register ModRM 0x{modrm:02x}")
        ext, r = (modrm >> 3) & 7, modrm & 7
        m = {0: "add", 5: "sub", 7: "cmp"}.get(ext)
        if m is None:
            raise DecodeError(off, f"unsupported 83 /{ext} form")
        imm = data[off + 2]
        imm = imm - 256 if imm >= 128 else imm
        return Instruction(m, (REGS[r], imm), bytes(data[off : off + 3]), off)
    if b0 == 0x81:
        need(6)
        modrm = data[off + 1]
        if modrm < 0xC0 or (modrm >> 3) & 7 != 6:
            raise DecodeError(off, f"unsupported 81 ModRM 0x{modrm:02x}")
        imm = int.from_bytes(data[off + 2 : off + 6], "little")
        return Instruction("xor", (REGS[modrm & 7], imm), bytes(data[off : off + 6]), off)
    if b0 == 0x8D:
        need(3)
        modrm = data[off + 1]
        if (modrm >> 6) != 0b01:
            raise DecodeError(off, f"lea ModRM 0x{modrm:02x} is not mode-01")
        reg, rm = (modrm >> 3) & 7, modrm & 7
        disp = data[off + 2]
        disp = disp - 256 if disp >= 128 else disp
        return Instruction("lea", (REGS[reg], REGS[rm], disp), bytes(data[off : off + 3]), off)
    if 0x50 <= b0 <= 0x57:
        return Instruction("push", (REGS[b0 - 0x50],), bytes([b0]), off)
    if 0x58 <= b0 <= 0x5F:
        return Instruction("pop", (REGS[b0 - 0x58],), bytes([b0]), off)
    if b0 in (0xEB, 0x74, 0x75):
        need(2)
        disp = data[off + 1]
        disp = disp - 256 if disp >= 128 else disp
        m = {0xEB: "jmp", 0x74: "jz", 0x75: "jnz"}[b0]
        return Instruction(m, (disp,), bytes(data[off : off + 2]), off)
    if b0 == 0xC3:
        return Instruction("ret", (), b"\xc3", off)
    if b0 == 0xF4:
        return Instruction("hlt", (), b"\xf4", off)
    if b0 == 0xE7:
        need(2)
        if data[off + 1] != 0x00:
            raise DecodeError(off, f"unsupported emit port 0x{data[off + 1]:02x}")
        return Instruction("emit", ("eax",), b"\xe7\x00", off)
    raise DecodeError(off, f"unknown opcode byte 0x{b0:02x}")


def disassemble(data: bytes) -> list[Instruction]:
    """Greedy left-to-right decode of ``data``.

    On failure raises :class:`DecodeError` carrying the failing offset and the
    instructions decoded so far (``.partial``).
    """
    out: list[Instruction] = []
    off = 0
    while off < len(data):
        try:
            ins = _decode_one(data, off)
        except DecodeError as exc:
            raise DecodeError(exc.offset, str(exc).split(": ", 1)[1], out) from None
        out.append(ins)
        off += ins.length
    return out


# ---------------------------------------------------------------------------
# programs
# ---------------------------------------------------------------------------


@dataclass
class ByteProgram:
    """An assembled text section: instructions, label table, raw bytes.

    Invariants (checked by :func:`validate_program`): the encodings concatenate
    to ``text`` exactly, every branch lands on an instruction boundary, and
    exactly one terminator (ret/hlt) is reachable from instruction 0.
    """

    instructions: list[Instruction]
    labels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        off = 0
        fixed = []
        for ins in self.instructions:
            fixed.append(ins.at(off))
            off += ins.length
        self.instructions = fixed
        self.text = b"".join(i.encoding for i in self.instructions)
        self.offsets = tuple(i.offset for i in self.instructions)
        self._index_at = {i.offset: k for k, i in enumerate(self.instructions)}

    @property
    def n_instructions(self) -> int:
        return len(self.instructions)

    def index_at_offset(self, off: int) -> int | None:
        return self._index_at.get(off)

    def branch_target_index(self, i: int) -> int:
        """Instruction index a branch at position ``i`` jumps to.

        End of text counts as boundary K (legal only for unreachable code,
        e.g. a trailing jmp+0 spliced after the terminator).
        """
        ins = self.instructions[i]
        dest = ins.offset + ins.length + ins.operands[0]
        if dest == len(self.text):
            return self.n_instructions
        idx = self.index_at_offset(dest)
        if idx is None:
            raise ProgramError(f"branch at {i} targets 0x{dest:x}, not an instruction boundary")
        return idx

    def source(self) -> str:
        """Render back to assembly text with labels at branch targets."""
        entries = program_to_entries(self)
        lines = []
        for kind, *rest in entries:
            if kind == "label":
                lines.append(f"{rest[0]}:")
            else:
                mnemonic, operands = rest
                if mnemonic in BRANCH_MNEMONICS:
                    lines.append(f"{mnemonic} {operands[0]}")
                elif mnemonic == "lea":
                    lines.append(f"lea {operands[0]}, [{operands[1]}{operands[2]:+d}]")
                elif operands:
                    lines.append(f"{mnemonic} " + ", ".join(_fmt_operand(o) for o in operands))
                else:
                    lines.append(mnemonic)
        return "\n".join(lines) + "\n"


def _fmt_operand(op) -> str:
    return f"0x{op:x}" if isinstance(op, int) else str(op)


def successors(prog: ByteProgram, i: int) -> list[int]:
    ins = prog.instructions[i]
    if ins.mnemonic in TERMINATORS:
        return []
    if ins.mnemonic == "jmp":
        return [prog.branch_target_index(i)]
    if ins.mnemonic in ("jz", "jnz"):
        return [i + 1, prog.branch_target_index(i)]
    return [i + 1]


def validate_program(prog: ByteProgram, require_terminator: bool = False) -> None:
    """Check ByteProgram invariants; raises ProgramError.

    Structural checks (encodings concatenate to text, labels in range, branch
    targets on boundaries) always run.  With ``require_terminator`` the
    program must also reach exactly one ret/hlt and can never fall off the
    end -- required for anything that will actually be executed; plain byte
    fragments (e.g. a lone ``mov``) are fine without it.
    """
    if b"".join(i.encoding for i in prog.instructions) != prog.text:
        raise ProgramError("text does not equal concatenated encodings")
    for name, idx in prog.labels.items():
        if not 0 <= idx <= prog.n_instructions:
            raise ProgramError(f"label {name} points outside the program")
    for i, ins in enumerate(prog.instructions):
        if ins.mnemonic in BRANCH_MNEMONICS:
            prog.branch_target_index(i)
    if not require_terminator:
        return
    seen: set[int] = set()
    stack = [0] if prog.instructions else []
    terminators = []
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        if i >= prog.n_instructions:
            raise ProgramError("execution can fall off the end of the text section")
        seen.add(i)
        if prog.instructions[i].mnemonic in TERMINATORS:
            terminators.append(i)
        stack.extend(successors(prog, i))
    if len(terminators) != 1:
        raise ProgramError(f"expected exactly one reachable terminator, found {len(terminators)}")


# entries: the symbolic splice/reassembly layer.  An entry is
# ("label", name) or ("instr", mnemonic, operands) with branch operands given
# as label names.

Entry = tuple


def _assemble_entries(entries: list[Entry]) -> ByteProgram:
    labels: dict[str, int] = {}
    pending: list[tuple[str, tuple]] = []
    index = 0
    for entry in entries:
        if entry[0] == "label":
            name = entry[1]
            if name in labels:
                raise AssemblyError(f"duplicate label {name!r}")
            labels[name] = index
        else:
            pending.append((entry[1], entry[2]))
            index += 1

    # first pass: sizes and offsets (all sizes are operand-shape determined);
    # offsets has a sentinel end entry so labels may bind end-of-text.
    offsets = []
    off = 0
    sizes = []
    for mnemonic, operands in pending:
        if mnemonic in BRANCH_MNEMONICS:
            size = 2
        else:
            size = len(encode_instruction(mnemonic, operands))
        offsets.append(off)
        sizes.append(size)
        off += size
    offsets.append(off)

    instructions = []
    for i, (mnemonic, operands) in enumerate(pending):
        if mnemonic in BRANCH_MNEMONICS:
            target = operands[0]
            if isinstance(target, str):
                if target not in labels:
                    raise UnresolvedLabelError(f"unresolved label {target!r}")
                tgt_index = labels[target]
            else:
                tgt_index = target
            disp = offsets[tgt_index] - (offsets[i] + sizes[i])
            if not -128 <= disp <= 127:
                raise DisplacementOverflowError(
                    f"branch at instruction {i} to {target!r}: displacement {disp} exceeds rel8"
                )
            enc = encode_instruction(mnemonic, (disp,))
            instructions.append(Instruction(mnemonic, (disp,), enc, offsets[i]))
        else:
            enc = encode_instruction(mnemonic, operands)
            instructions.append(Instruction(mnemonic, operands, enc, offsets[i]))
    prog = ByteProgram(instructions, labels)
    validate_program(prog)
    return prog


def program_to_entries(prog: ByteProgram) -> list[Entry]:
    """Symbolic view of a program: labels + instructions with label operands."""
    label_at: dict[int, list[str]] = {}
    for name, idx in prog.labels.items():
        label_at.setdefault(idx, []).append(name)
    target_label: dict[int, str] = {}
    for i, ins in enumerate(prog.instructions):
        if ins.mnemonic in BRANCH_MNEMONICS:
            t = prog.branch_target_index(i)
            existing = label_at.get(t, [])
            if existing:
                target_label[t] = sorted(existing)[0]
            elif t not in target_label:
                name = f"L{t}"
                while name in prog.labels:
                    name += "_"
                target_label[t] = name
    entries: list[Entry] = []
    for i in range(prog.n_instructions + 1):
        names = sorted(set(label_at.get(i, [])) | ({target_label[i]} if i in target_label else set()))
        for name in names:
            entries.append(("label", name))
        if i == prog.n_instructions:
            break
        ins = prog.instructions[i]
        if ins.mnemonic in BRANCH_MNEMONICS:
            entries.append(("instr", ins.mnemonic, (target_label[prog.branch_target_index(i)],)))
        else:
            entries.append(("instr", ins.mnemonic, ins.operands))
    return entries


def parse_source(source: str) -> list[Entry]:
    """Parse assembly text: one instruction per line, ``label:`` prefixes,
    ``;`` comments."""
    entries: list[Entry] = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        while ":" in line.split(" ")[0] or (line.endswith(":") and "," not in line):
            head, _, rest = line.partition(":")
            head = head.strip()
            if not head or " " in head or "," in head:
                break
            entries.append(("label", head))
            line = rest.strip()
            if not line:
                break
        if not line:
            continue
        parts = line.split(None, 1)
        mnemonic = parts[0].lower()
        operands: tuple = ()
        if len(parts) > 1:
            operands = tuple(_parse_operand(tok.strip(), lineno) for tok in parts[1].split(","))
        if mnemonic == "lea":
            operands = _parse_lea_operands(operands, lineno)
        entries.append(("instr", mnemonic, operands))
    return entries


def _parse_operand(tok: str, lineno: int):
    low = tok.lower()
    if low in REG_NUM or low == "ax":
        return low
    if low.startswith("[") and low.endswith("]"):
        return low  # lea memory operand, split later
    try:
        return int(low, 0)
    except ValueError:
        return tok  # label reference


def _parse_lea_operands(operands: tuple, lineno: int) -> tuple:
    if len(operands) != 2 or not isinstance(operands[1], str) or not operands[1].startswith("["):
        raise AssemblyError(f"line {lineno}: lea expects 'lea reg, [reg+disp]'")
    inner = operands[1][1:-1].replace(" ", "")
    base = inner
    disp = 0
    for sep in ("+", "-"):
        if sep in inner[1:]:
            pos = inner.index(sep, 1)
            base, disp_s = inner[:pos], inner[pos:]
            disp = int(disp_s, 0)
            break
    if base not in REG_NUM:
        raise AssemblyError(f"line {lineno}: bad lea base register {base!r}")
    return (operands[0], base, disp)


def assemble(source: str) -> ByteProgram:
    """Assemble text into a validated :class:`ByteProgram`."""
    return _assemble_entries(parse_source(source))


def program_from_bytes(data: bytes) -> ByteProgram:
    """Disassemble raw text-section bytes into a structurally valid program."""
    prog = ByteProgram(disassemble(data))
    validate_program(prog)
    return prog


# ---------------------------------------------------------------------------
# interpreter
# ---------------------------------------------------------------------------


@dataclass
class MachineState:
    """Architectural state: 8 regs, ZF, 64 KiB memory with a descending stack,
    pc (byte offset into the text), emitted output, halt flag, step count."""

    regs: list[int] = field(default_factory=lambda: [0] * 8)
    zf: bool = False
    mem: bytearray = field(default_factory=lambda: bytearray(MEM_SIZE))
    pc: int = 0
    output: list[int] = field(default_factory=list)
    halted: bool = False
    steps: int = 0

    def copy(self) -> "MachineState":
        s = MachineState(list(self.regs), self.zf, bytearray(self.mem), self.pc, list(self.output), self.halted, self.steps)
        return s

    @property
    def esp(self) -> int:
        return self.regs[4]


def observable(state: MachineState) -> tuple:
    """The observationally-relevant end state.

    Bytes below esp are dead scratch (push/pop pairs scribble there), so the
    memory component is the live region ``mem[esp:]`` only.
    """
    return (
        tuple(state.regs),
        state.zf,
        tuple(state.output),
        state.halted,
        bytes(state.mem[state.esp :]),
    )


def states_equivalent(a: MachineState, b: MachineState) -> bool:
    return observable(a) == observable(b)


def step(state: MachineState, prog: ByteProgram) -> None:
    """Execute one instruction at state.pc; raises VM errors."""
    idx = prog.index_at_offset(state.pc)
    if idx is None:
        raise WildJumpError(state.pc)
    ins = prog.instructions[idx]
    regs = state.regs
    m = ins.mnemonic
    next_pc = state.pc + ins.length
    if m in ("nop",) or (m == "xchg" and ins.operands == ("ax", "ax")):
        pass
    elif m == "mov" and isinstance(ins.operands[1], int):
        regs[REG_NUM[ins.operands[0]]] = ins.operands[1] & MASK32
    elif m == "mov":
        regs[REG_NUM[ins.operands[0]]] = regs[REG_NUM[ins.operands[1]]]
    elif m == "xchg":
        d, s = REG_NUM[ins.operands[0]], REG_NUM[ins.operands[1]]
        regs[d], regs[s] = regs[s], regs[d]
    elif m == "add" and isinstance(ins.operands[1], int):
        r = REG_NUM[ins.operands[0]]
        regs[r] = (regs[r] + ins.operands[1]) & MASK32
        state.zf = regs[r] == 0
    elif m == "add":
        d = REG_NUM[ins.operands[0]]
        regs[d] = (regs[d] + regs[REG_NUM[ins.operands[1]]]) & MASK32
        state.zf = regs[d] == 0
    elif m == "sub":
        r = REG_NUM[ins.operands[0]]
        regs[r] = (regs[r] - ins.operands[1]) & MASK32
        state.zf = regs[r] == 0
    elif m == "cmp":
        r = REG_NUM[ins.operands[0]]
        state.zf = ((regs[r] - ins.operands[1]) & MASK32) == 0
    elif m == "xor" and isinstance(ins.operands[1], int):
        d = REG_NUM[ins.operands[0]]
        regs[d] = regs[d] ^ (ins.operands[1] & MASK32)
        state.zf = regs[d] == 0
    elif m == "xor":
        d = REG_NUM[ins.operands[0]]
        regs[d] = regs[d] ^ regs[REG_NUM[ins.operands[1]]]
        state.zf = regs[d] == 0
    elif m == "lea":
        d, b, disp = ins.operands
        regs[REG_NUM[d]] = (regs[REG_NUM[b]] + disp) & MASK32
    elif m == "push":
        val = regs[REG_NUM[ins.operands[0]]]
        new_sp = regs[4] - 4
        if new_sp < 0:
            raise StackFaultError("stack overflow")
        state.mem[new_sp : new_sp + 4] = val.to_bytes(4, "little")
        regs[4] = new_sp
    elif m == "pop":
        sp = regs[4]
        if sp + 4 > MEM_SIZE:
            raise StackFaultError("stack underflow")
        val = int.from_bytes(state.mem[sp : sp + 4], "little")
        regs[4] = sp + 4
        regs[REG_NUM[ins.operands[0]]] = val
    elif m == "jmp":
        next_pc = state.pc + ins.length + ins.operands[0]
    elif m == "jz":
        if state.zf:
            next_pc = state.pc + ins.length + ins.operands[0]
    elif m == "jnz":
        if not state.zf:
            next_pc = state.pc + ins.length + ins.operands[0]
    elif m == "ret" or m == "hlt":
        state.halted = True
    elif m == "emit":
        state.output.append(regs[0])
    else:  # pragma: no cover - table is closed
        raise VMError(f"unimplemented mnemonic {m}")
    state.steps += 1
    if not state.halted:
        state.pc = next_pc


def run(state: MachineState, prog: ByteProgram, budget: int) -> MachineState:
    """Run ``state`` against ``prog`` until halt or budget; mutates and returns it."""
    while not state.halted:
        if state.steps >= budget:
            raise BudgetExhaustedError(state.steps)
        step(state, prog)
    return state


def execute(prog: ByteProgram, inputs: dict[str, int] | None = None, budget: int = 100_000) -> MachineState:
    """Execute from the entry point with given initial register values.

    Deterministic in (prog, inputs, budget).  esp defaults to the top of
    memory.  Raises BudgetExhaustedError / WildJumpError / StackFaultError.
    """
    state = MachineState()
    state.regs[4] = MEM_SIZE
    for name, value in (inputs or {}).items():
        state.regs[REG_NUM[name]] = value & MASK32
    return run(state, prog, budget)


# ---------------------------------------------------------------------------
# semantic nops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SemanticNop:
    """A byte sequence whose execution changes nothing but pc."""

    name: str
    encoding: bytes

    @property
    def length(self) -> int:
        return len(self.encoding)


DEFAULT_VOCAB: tuple[SemanticNop, ...] = (
    SemanticNop("nop", bytes.fromhex("90")),
    SemanticNop("xchg_ax_ax", bytes.fromhex("6690")),
    SemanticNop("mov_eax_eax", bytes.fromhex("89c0")),
    SemanticNop("mov_ecx_ecx", bytes.fromhex("89c9")),
    SemanticNop("mov_edx_edx", bytes.fromhex("89d2")),
    SemanticNop("mov_ebx_ebx", bytes.fromhex("89db")),
    SemanticNop("lea_eax_eax0", bytes.fromhex("8d4000")),
    SemanticNop("lea_ecx_ecx0", bytes.fromhex("8d4900")),
    SemanticNop("lea_edx_edx0", bytes.fromhex("8d5200")),
    SemanticNop("lea_ebx_ebx0", bytes.fromhex("8d5b00")),
    SemanticNop("push_pop_eax", bytes.fromhex("5058")),
    SemanticNop("push_pop_ecx", bytes.fromhex("5159")),
    SemanticNop("push_pop_edx", bytes.fromhex("525a")),
    SemanticNop("push_pop_ebx", bytes.fromhex("535b")),
    SemanticNop("jmp_zero", bytes.fromhex("eb00")),
    SemanticNop("xchg_ecx_ecx", bytes.fromhex("87c9")),
)


def load_vocabulary(path: str) -> list[SemanticNop]:
    """Load a vocabulary file: one nop per line, '<hexbytes> <name>'."""
    vocab = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<hexbytes> <name>'")
            try:
                enc = bytes.fromhex(parts[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad hex {parts[0]!r}") from None
            vocab.append(SemanticNop(parts[1], enc))
    return vocab


def save_vocabulary(vocab: list[SemanticNop], path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for nop in vocab:
            fh.write(f"{nop.encoding.hex()} {nop.name}\n")


def random_machine_state(rng: np.random.Generator) -> MachineState:
    """Sample a plausible mid-execution state for nop verification."""
    state = MachineState()
    state.regs = [int(rng.integers(0, 1 << 32)) for _ in range(8)]
    state.regs[4] = int(rng.integers(0x40, MEM_SIZE // 4)) * 4
    state.zf = bool(rng.integers(0, 2))
    lo = max(0, state.regs[4] - 64)
    hi = min(MEM_SIZE, state.regs[4] + 64)
    state.mem[lo:hi] = rng.integers(0, 256, size=hi - lo, dtype=np.uint8).tobytes()
    if rng.integers(0, 2):
        state.output = [int(v) for v in rng.integers(0, 1 << 32, size=3)]
    return state


@dataclass
class VocabularyViolation:
    nop: str
    trial: int
    detail: str
    witness_regs: tuple


@dataclass
class VocabularyReport:
    checked: int
    trials: int
    violations: list[VocabularyViolation]

    @property
    def passed(self) -> bool:
        return not self.violations


def verify_vocabulary(vocab: list[SemanticNop], trials: int = 200, seed: int = 0) -> VocabularyReport:
    """Check that executing each candidate from random states changes nothing
    but pc.  Every encoding must decode; violators are reported with a witness.
    """
    rng = np.random.default_rng(seed)
    violations: list[VocabularyViolation] = []
    for nop in vocab:
        instructions = disassemble(nop.encoding)  # raises DecodeError on garbage
        frag = ByteProgram(instructions)
        for t in range(trials):
            before = random_machine_state(rng)
            after = before.copy()
            detail = None
            try:
                for _ in range(len(instructions)):
                    step(after, frag)
                    if after.halted:
                        detail = "halted mid-nop"
                        break
            except VMError as exc:
                detail = f"vm fault: {exc}"
            if detail is None and after.pc != nop.length:
                detail = f"pc advanced to {after.pc}, expected {nop.length}"
            if detail is None:
                if after.regs != before.regs:
                    detail = "registers changed"
                elif after.zf != before.zf:
                    detail = "ZF changed"
                elif after.output != before.output:
                    detail = "output changed"
                elif bytes(after.mem[after.esp :]) != bytes(before.mem[before.esp :]):
                    detail = "live memory changed"
            if detail is not None:
                violations.append(VocabularyViolation(nop.name, t, detail, tuple(before.regs)))
                break
    return VocabularyReport(checked=len(vocab), trials=trials, violations=violations)


# ---------------------------------------------------------------------------
# insertion geometry
# ---------------------------------------------------------------------------


def branch_spans(prog: ByteProgram) -> list[tuple[int, int, int]]:
    """Per-branch (lo_index, hi_index, disp): insertions at boundaries b with
    lo < b <= hi change the branch's displacement."""
    spans = []
    for i, ins in enumerate(prog.instructions):
        if ins.mnemonic in BRANCH_MNEMONICS:
            t = prog.branch_target_index(i)
            spans.append((min(i, t), max(i, t), ins.operands[0]))
    return spans


def find_insertion_points(
    prog: ByteProgram,
    vocab: tuple[SemanticNop, ...] | list[SemanticNop] = DEFAULT_VOCAB,
    exclude_branch_spans: bool = False,
) -> list[int]:
    """Instruction boundaries (0..K) where inserting a nop is legal.

    A boundary is dropped when some rel8 branch crossing it would overflow
    after a single worst-case (longest vocabulary entry) insertion.  With
    ``exclude_branch_spans`` every boundary inside a branch span is dropped,
    which keeps all existing encodings byte-stable under insertion -- the
    alignment DP relies on that.
    """
    max_len = max((n.length for n in vocab), default=0)
    spans = branch_spans(prog)
    points = []
    for b in range(prog.n_instructions + 1):
        ok = True
        for lo, hi, disp in spans:
            if lo < b <= hi:
                if exclude_branch_spans:
                    ok = False
                    break
                stretched = disp + max_len if disp >= 0 else disp - max_len
                if not -128 <= stretched <= 127:
                    ok = False
                    break
        if ok:
            points.append(b)
    return points


def insert_nops(prog: ByteProgram, insertions: list[tuple[int, SemanticNop]]) -> ByteProgram:
    """Splice nops at instruction boundaries and reassemble.

    Nops at boundary b land between instructions b-1 and b; labels keep
    pointing at their original instructions, so jumps skip inserted nops.
    Displacements are recomputed; overflow raises DisplacementOverflowError.
    """
    by_boundary: dict[int, list[SemanticNop]] = {}
    for boundary, nop in insertions:
        if not 0 <= boundary <= prog.n_instructions:
            raise ValueError(f"boundary {boundary} out of range")
        by_boundary.setdefault(boundary, []).append(nop)

    out: list[Entry] = []
    counter = 0
    used = set(prog.labels)

    def fresh_label() -> str:
        nonlocal counter
        while f"__n{counter}" in used:
            counter += 1
        name = f"__n{counter}"
        counter += 1
        return name

    def nop_entries(boundary: int) -> list[Entry]:
        result: list[Entry] = []
        for nop in by_boundary.get(boundary, ()):
            for ins in disassemble(nop.encoding):
                if ins.mnemonic in BRANCH_MNEMONICS:
                    # intra-nop branch (jmp +0) targets the next spliced slot
                    name = fresh_label()
                    result.append(("instr", ins.mnemonic, (name,)))
                    result.append(("label", name))
                else:
                    result.append(("instr", ins.mnemonic, ins.operands))
        return result

    pending_labels: list[Entry] = []
    index = 0
    for entry in program_to_entries(prog):
        if entry[0] == "label":
            pending_labels.append(entry)
        else:
            out.extend(nop_entries(index))
            out.extend(pending_labels)
            pending_labels = []
            out.append(entry)
            index += 1
    # end-of-text labels stay at the pre-insertion end; trailing nops follow
    out.extend(pending_labels)
    out.extend(nop_entries(index))
    return _assemble_entries(out)
