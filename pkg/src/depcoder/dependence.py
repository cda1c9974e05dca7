"""Instruction-level data and control dependence analysis.

Data dependences come from reaching definitions over abstract locations that
over-approximate the memory an expression can touch:

  * ``[rsp + c]`` with a tracked stack pointer -> one precise stack slot
  * stack addresses with an index register or an untracked rsp -> the whole
    stack frame
  * any other memory expression -> the whole memory space

Control dependences use the post-dominance-frontier criterion, lifted from
basic blocks to instructions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cfg import ENTRY, EXIT, JCC_MNEMONICS, Cfg, CfgError, build_cfg
from .frontend import CANONICAL_REG, Instruction, Operand, ParsedFunction


class DependenceError(Exception):
    pass


class UnsupportedInstruction(DependenceError):
    pass


# ---------------------------------------------------------------------------
# Abstract locations

@dataclass(frozen=True)
class AbstractLocation:
    kind: str  # register | flags | stack_slot | stack_frame_all | memory_all
    name: str | None = None  # canonical 64-bit register name
    offset: int | None = None  # frame-relative byte offset for stack slots

    def __repr__(self):
        if self.kind == "register":
            return f"reg({self.name})"
        if self.kind == "stack_slot":
            return f"slot({self.offset})"
        return self.kind


FLAGS = AbstractLocation("flags")
STACK_FRAME_ALL = AbstractLocation("stack_frame_all")
MEMORY_ALL = AbstractLocation("memory_all")
_MEMORY_KINDS = ("stack_slot", "stack_frame_all", "memory_all")


def reg_loc(name: str) -> AbstractLocation:
    return AbstractLocation("register", name=CANONICAL_REG[name])


def slot_loc(offset: int) -> AbstractLocation:
    return AbstractLocation("stack_slot", offset=offset)


def overlap(a: AbstractLocation, b: AbstractLocation) -> bool:
    """May the two locations denote the same storage?"""
    if a.kind == "register" or b.kind == "register":
        return a == b
    if a.kind == "flags" or b.kind == "flags":
        return a == b
    # both are memory regions
    if a.kind == "stack_slot" and b.kind == "stack_slot":
        return a.offset == b.offset
    return True  # slot/frame/memory_all always may-overlap each other


def _is_precise(loc: AbstractLocation) -> bool:
    """Precise locations admit strong updates (their defs kill earlier defs)."""
    return loc.kind in ("register", "flags", "stack_slot")


# ---------------------------------------------------------------------------
# Stack-pointer tracking

def frame_offsets(instrs: list[Instruction]) -> list[int | None]:
    """rsp offset relative to function entry, before each instruction.

    Tracking follows listing order through push/pop and ``sub/add rsp, imm``;
    any other write to rsp untracks it for the rest of the function.
    """
    out: list[int | None] = []
    off: int | None = 0
    for instr in instrs:
        out.append(off)
        if off is None:
            continue
        m, ops = instr.mnemonic, instr.operands
        if m == "push":
            off -= 8
        elif m == "pop":
            off += 8
            if ops and ops[0].kind == "register" and CANONICAL_REG[ops[0].reg] == "rsp":
                off = None
        elif m in ("sub", "add") and len(ops) == 2 \
                and ops[0].kind == "register" and CANONICAL_REG[ops[0].reg] == "rsp":
            if ops[1].kind == "immediate":
                off += ops[1].value if m == "add" else -ops[1].value
            else:
                off = None
        elif _writes_rsp(instr):
            off = None
    return out


def _writes_rsp(instr: Instruction) -> bool:
    ops = instr.operands
    if instr.mnemonic in ("mov", "lea", "imul", "and", "or", "xor", "shl", "shr", "idiv"):
        return bool(ops) and ops[0].kind == "register" and CANONICAL_REG[ops[0].reg] == "rsp"
    return False


# ---------------------------------------------------------------------------
# may_locations and def/use

def may_locations(op: Operand, frame_off: int | None) -> set[AbstractLocation]:
    """Locations an operand may access when read or written."""
    if op.kind == "register":
        return {reg_loc(op.reg)}
    if op.kind in ("immediate", "label"):
        return set()
    # memory
    base = CANONICAL_REG[op.base] if op.base else None
    index = CANONICAL_REG[op.index] if op.index else None
    if base == "rsp" or index == "rsp":
        if base == "rsp" and index is None and frame_off is not None:
            return {slot_loc(frame_off + op.disp)}
        return {STACK_FRAME_ALL}
    return {MEMORY_ALL}


def _addr_regs(op: Operand) -> set[AbstractLocation]:
    """Address registers of a memory operand, excluding the stack anchor rsp."""
    if op.kind != "memory":
        return set()
    regs = set()
    for r in (op.base, op.index):
        if r is not None and CANONICAL_REG[r] != "rsp":
            regs.add(reg_loc(r))
    return regs


# System-V caller-saved clobbering for call sites (configurable via on_unknown
# only for unsupported mnemonics; call itself always uses these sets).
CALL_DEFS = frozenset({reg_loc(r) for r in
                       ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")}
                      | {MEMORY_ALL})
CALL_USES = frozenset({reg_loc(r) for r in ("rdi", "rsi", "rdx", "rcx", "r8", "r9", "rsp")}
                      | {MEMORY_ALL})

_RMW_MNEMONICS = frozenset({"add", "sub", "and", "or", "xor", "shl", "shr"})
SUPPORTED_MNEMONICS = (_RMW_MNEMONICS | JCC_MNEMONICS
                       | {"mov", "lea", "push", "pop", "imul", "idiv",
                          "cmp", "test", "jmp", "call", "ret", "nop"})


def def_use(instr: Instruction, frame_off: int | None, flags_channel: bool = False,
            on_unknown: str = "error") -> tuple[set[AbstractLocation], set[AbstractLocation]]:
    """Per-mnemonic def/use sets over abstract locations.

    Address registers count as uses only on destination operands (reads
    through a pointer carry the pointed-to region, not the pointer register).
    """
    m, ops = instr.mnemonic, instr.operands
    defs: set[AbstractLocation] = set()
    uses: set[AbstractLocation] = set()
    rsp = reg_loc("rsp")
    flags = {FLAGS} if flags_channel else set()

    def locs(op):
        return may_locations(op, frame_off)

    if m == "nop":
        pass
    elif m == "mov" and len(ops) == 2:
        defs |= locs(ops[0])
        uses |= locs(ops[1]) | _addr_regs(ops[0])
    elif m == "lea" and len(ops) == 2 and ops[1].kind == "memory":
        defs |= locs(ops[0])
        uses |= _addr_regs(ops[1])
    elif m == "push" and len(ops) == 1:
        defs |= {rsp} | ({slot_loc(frame_off - 8)} if frame_off is not None else {STACK_FRAME_ALL})
        uses |= {rsp} | locs(ops[0])
    elif m == "pop" and len(ops) == 1:
        defs |= {rsp} | locs(ops[0])
        uses |= {rsp} | ({slot_loc(frame_off)} if frame_off is not None else {STACK_FRAME_ALL})
    elif m in _RMW_MNEMONICS and len(ops) == 2:
        defs |= locs(ops[0]) | flags
        uses |= locs(ops[0]) | locs(ops[1]) | _addr_regs(ops[0])
    elif m == "imul" and len(ops) == 1:
        defs |= {reg_loc("rax"), reg_loc("rdx")} | flags
        uses |= {reg_loc("rax")} | locs(ops[0])
    elif m == "imul" and len(ops) == 2:
        defs |= locs(ops[0]) | flags
        uses |= locs(ops[0]) | locs(ops[1])
    elif m == "imul" and len(ops) == 3:
        defs |= locs(ops[0]) | flags
        uses |= locs(ops[1])
    elif m == "idiv" and len(ops) == 1:
        defs |= {reg_loc("rax"), reg_loc("rdx")} | flags
        uses |= {reg_loc("rax"), reg_loc("rdx")} | locs(ops[0])
    elif m in ("cmp", "test") and len(ops) == 2:
        defs |= flags
        uses |= locs(ops[0]) | locs(ops[1])
    elif m in JCC_MNEMONICS:
        uses |= flags
    elif m == "jmp":
        if ops and ops[0].kind != "label":
            uses |= locs(ops[0])
    elif m == "call":
        defs |= set(CALL_DEFS)
        uses |= set(CALL_USES)
        if ops and ops[0].kind != "label":
            uses |= locs(ops[0])
    elif m == "ret":
        uses |= {reg_loc("rax"), rsp}
    else:
        if on_unknown == "conservative":
            blob = set(CALL_DEFS) | set(CALL_USES)
            return blob, set(blob)
        raise UnsupportedInstruction(
            f"unsupported instruction {instr.raw_text!r} (index {instr.index})")
    return defs, uses


# ---------------------------------------------------------------------------
# Reaching definitions -> data dependences

def data_dependences(instrs: list[Instruction], cfg: Cfg, flags_channel: bool = False,
                     on_unknown: str = "error") -> set[tuple[int, int]]:
    """Edges (u, v): instruction u may use a value defined at v."""
    n = len(instrs)
    if n == 0:
        return set()
    frames = frame_offsets(instrs)
    du = [def_use(i, frames[i.index], flags_channel, on_unknown) for i in instrs]

    def transfer(defs_in: frozenset, lo: int, hi: int) -> frozenset:
        cur = set(defs_in)
        for i in range(lo, hi):
            for d in du[i][0]:
                if _is_precise(d):
                    cur = {(j, L) for (j, L) in cur if L != d}
                cur.add((i, d))
        return frozenset(cur)

    nblocks = len(cfg.blocks)
    preds = cfg.preds()
    ins = [frozenset() for _ in range(nblocks)]
    outs = [frozenset() for _ in range(nblocks)]
    changed = True
    while changed:
        changed = False
        for b in range(nblocks):
            merged = set()
            for p in preds[b]:
                if p >= 0:
                    merged |= outs[p]
            new_in = frozenset(merged)
            new_out = transfer(new_in, *cfg.blocks[b])
            if new_in != ins[b] or new_out != outs[b]:
                ins[b], outs[b] = new_in, new_out
                changed = True

    edges: set[tuple[int, int]] = set()
    for b in range(nblocks):
        reach = set(ins[b])
        lo, hi = cfg.blocks[b]
        for i in range(lo, hi):
            for use in du[i][1]:
                for (j, d) in reach:
                    if j != i and overlap(use, d):
                        edges.add((i, j))
            for d in du[i][0]:
                if _is_precise(d):
                    reach = {(j, L) for (j, L) in reach if L != d}
                reach.add((i, d))
    return edges


# ---------------------------------------------------------------------------
# Post-dominators -> control dependences

def _postdominators(cfg: Cfg) -> dict[int, int]:
    """Immediate post-dominator per node of the augmented CFG.

    Iterative intersection on the reverse graph rooted at EXIT (Cooper-style),
    over nodes {ENTRY, EXIT} + blocks with the ENTRY->EXIT augmentation edge.
    """
    succ = {b: list(vs) for b, vs in cfg.succ.items()}
    succ.setdefault(ENTRY, [0] if cfg.blocks else [EXIT])
    if EXIT not in succ[ENTRY]:
        succ[ENTRY] = succ[ENTRY] + [EXIT]

    # reverse post-order of the reverse graph from EXIT
    preds_of: dict[int, list[int]] = {EXIT: [], ENTRY: []}
    for b in range(len(cfg.blocks)):
        preds_of[b] = []
    for u, vs in succ.items():
        for v in vs:
            preds_of[v].append(u)
    order: list[int] = []
    seen = set()

    def dfs(node):
        stack = [(node, iter(preds_of[node]))]
        seen.add(node)
        while stack:
            cur, it = stack[-1]
            advanced = False
            for nxt in it:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append((nxt, iter(preds_of[nxt])))
                    advanced = True
                    break
            if not advanced:
                order.append(cur)
                stack.pop()

    dfs(EXIT)
    rpo = list(reversed(order))  # EXIT first
    rpo_index = {node: i for i, node in enumerate(rpo)}

    ipdom: dict[int, int | None] = {node: None for node in rpo}
    ipdom[EXIT] = EXIT

    def intersect(a, b):
        while a != b:
            while rpo_index[a] > rpo_index[b]:
                a = ipdom[a]
            while rpo_index[b] > rpo_index[a]:
                b = ipdom[b]
        return a

    changed = True
    while changed:
        changed = False
        for node in rpo:
            if node == EXIT:
                continue
            candidates = [s for s in succ[node] if ipdom.get(s) is not None]
            if not candidates:
                continue
            new = candidates[0]
            for s in candidates[1:]:
                new = intersect(new, s)
            if ipdom[node] != new:
                ipdom[node] = new
                changed = True
    return {k: v for k, v in ipdom.items() if v is not None}


def block_control_dependences(cfg: Cfg) -> set[tuple[int, int]]:
    """(dependent block, controlling block) pairs per the post-dominance
    frontier criterion; controlling blocks are real branch blocks."""
    if not cfg.blocks:
        return set()
    ipdom = _postdominators(cfg)
    out: set[tuple[int, int]] = set()
    for a, vs in cfg.succ.items():
        if a < 0 or len(vs) < 2:
            continue
        for s in vs:
            runner = s
            while runner != ipdom[a]:
                if runner >= 0:
                    out.add((runner, a))
                runner = ipdom[runner]
    return out


def control_dependences(instrs: list[Instruction], cfg: Cfg) -> set[tuple[int, int]]:
    """Edges (u, v): the branch at v decides whether u executes."""
    edges: set[tuple[int, int]] = set()
    for b, a in block_control_dependences(cfg):
        branch = cfg.terminator_of(a)
        lo, hi = cfg.blocks[b]
        for i in range(lo, hi):
            if i != branch:
                edges.add((i, branch))
    return edges


# ---------------------------------------------------------------------------
# Combined dependence graph

@dataclass
class DependenceGraph:
    n_nodes: int
    #: directed (u, v, kind): u depends on v; kind in {"data", "control"}
    edges: set[tuple[int, int, str]] = field(default_factory=set)

    def directed_pairs(self) -> set[tuple[int, int]]:
        return {(u, v) for (u, v, _) in self.edges}

    def sorted_edges(self) -> list[tuple[int, int, str]]:
        return sorted(self.edges)

    def to_dict(self) -> dict:
        return {"nodes": self.n_nodes,
                "edges": [[u, v, k] for (u, v, k) in self.sorted_edges()]}

    @classmethod
    def from_dict(cls, d: dict) -> "DependenceGraph":
        return cls(n_nodes=d["nodes"],
                   edges={(u, v, k) for u, v, k in d["edges"]})


def dependence_graph(fn: ParsedFunction, flags_channel: bool = False,
                     on_unknown: str = "error") -> DependenceGraph:
    """Union of data and control dependences for one function."""
    instrs = fn.instructions
    edges: set[tuple[int, int, str]] = set()
    try:
        cfg = build_cfg(fn)
        for u, v in data_dependences(instrs, cfg, flags_channel, on_unknown):
            edges.add((u, v, "data"))
        for u, v in control_dependences(instrs, cfg):
            edges.add((u, v, "control"))
    except (CfgError, DependenceError) as e:
        raise DependenceError(f"{fn.name}: {e}") from e
    return DependenceGraph(n_nodes=len(instrs), edges=edges)
