"""Crash-stack role analysis and patch-site selection.

Evidence about how each stack frame handles the crash variable comes from
one of two layers: an executor trace (exact, available for scenarios) or a
token-level scan of source text (heuristic, for plain source corpora). Both
produce the same :class:`Evidence` shape, which the role assignment consumes.
"""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .classifier import CivClass
from .errors import AnalysisError
from .ingest import (
    CompartmentPolicy,
    CrashReport,
    IfaceType,
    InterfaceSpec,
    MutationLog,
    PointerType,
    ScalarType,
    SourceIndex,
    is_path_prefix,
    parse_path,
)
from .scenario import FORWARD_KINDS, INTERPRET_KINDS, ExecutionOutcome

logger = logging.getLogger(__name__)


class Role(str, Enum):
    CONSUME = "CONSUME"
    FORWARD = "FORWARD"
    PRESENCE = "PRESENCE"
    COMMIT = "COMMIT"
    CRASH_SITE = "CRASH_SITE"


@dataclass(frozen=True)
class CrashVariable:
    entry_function: str
    path: str
    leaf: IfaceType
    unit: str  # payload path of the value patched as one unit
    unit_label: str


def crash_variable(mutation: MutationLog, cls: CivClass, spec: InterfaceSpec) -> CrashVariable:
    resolved = spec.resolve(mutation.entry_function, mutation.mutated_path)
    leaf = resolved.leaf
    if isinstance(leaf, PointerType):
        label = f"{leaf.target} *"
    elif isinstance(leaf, ScalarType):
        label = f"{mutation.mutated_path} (scalar token)"
    else:
        label = f"{leaf.handle_kind} handle"
    # every patching unit bottoms out at the mutated leaf: the field for
    # structured payloads, the instance itself otherwise
    return CrashVariable(mutation.entry_function, mutation.mutated_path, leaf, mutation.mutated_path, label)


# ---------------------------------------------------------------------------
# Evidence


@dataclass(frozen=True)
class FrameEvidence:
    index: int
    symbol: str
    in_scope: bool
    interprets: bool
    forwards: bool
    first_unit_op: int | None
    crash_path_op: int | None
    unit_expr: str | None
    conflict: bool = False

    @property
    def insertion_point(self) -> int | None:
        return self.first_unit_op if self.first_unit_op is not None else self.crash_path_op


@dataclass(frozen=True)
class Evidence:
    layer: str  # "trace" | "source"
    frames: tuple[FrameEvidence, ...]


def _scope_expr(bindings: dict[str, str | None], unit: str) -> str | None:
    exact = sorted(n for n, o in bindings.items() if o == unit)
    if exact:
        return exact[0]
    outer = sorted(
        ((len(o), n, o) for n, o in bindings.items() if o is not None and is_path_prefix(o, unit)), reverse=True
    )
    if outer:
        _, name, origin = outer[0]
        return name + unit[len(origin):]
    return None


def evidence_from_trace(outcome: ExecutionOutcome, crash_var: CrashVariable) -> Evidence:
    """Exact per-frame evidence from an executor trace of the crashing payload."""
    crash = outcome.crash
    if crash is None:
        raise AnalysisError("trace evidence needs a crashing execution")
    unit = crash_var.unit
    events = defaultdict(list)
    for ev in outcome.trace:
        events[ev.frame].append(ev)
    frames = []
    for k, (symbol, act) in enumerate(zip(crash.stack, crash.chain)):
        bindings: dict[str, str | None] = {}
        interprets = forwards = False
        first = None
        last_op = None
        for ev in events[act]:
            if ev.kind == "enter":
                bindings = dict(ev.touched)
                continue
            if ev.kind == "inject":
                bindings.update(dict(ev.touched))
                continue
            last_op = ev.op_index
            if any(origin == unit for _, origin in ev.touched):
                if first is None:
                    first = ev.op_index
                if ev.kind in INTERPRET_KINDS:
                    interprets = True
                elif ev.kind in FORWARD_KINDS:
                    forwards = True
        expr = _scope_expr(bindings, unit)
        crash_op = crash.faulting_op[1] if k == 0 else last_op
        frames.append(FrameEvidence(k, symbol, expr is not None, interprets, forwards, first, crash_op, expr))
    return Evidence("trace", tuple(frames))


_INTERPRET_WORDS = {"deref", "index", "read_cstr", "use", "guard", "resolve", "if", "while", "switch", "assert"}
_CALL_SITE = re.compile(r"([A-Za-z_]\w*)\s*\(")


def _norm(line: str) -> str:
    return re.sub(r"\s*->\s*", ".", line)


def _call_args(line: str, callee: str) -> list[str] | None:
    m = re.search(rf"(?<![\w.]){re.escape(callee)}\s*\(", line)
    if not m:
        return None
    depth, cur, args = 1, "", []
    for ch in line[m.end():]:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                break
        if ch == "," and depth == 1:
            args.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        args.append(cur.strip())
    return args


def _header_params(body: str) -> list[str]:
    header = body.split("{", 1)[0]
    m = re.search(r"\((.*)\)", header, re.S)
    if not m or not m.group(1).strip() or m.group(1).strip() == "void":
        return []
    out = []
    for decl in m.group(1).split(","):
        ids = re.findall(r"[A-Za-z_]\w*", decl)
        out.append(ids[-1] if ids else "")
    return out


def _occurrence_kind(line: str, alias: str) -> tuple[bool, bool]:
    """(interprets, forwards) for the alias occurrences on one source line."""
    interp = fwd = False
    pat = re.compile(rf"(?<![\w.]){re.escape(alias)}(?![\w])")
    stripped = line.strip()
    lead = re.match(r"[A-Za-z_]\w*", stripped)
    lead_word = lead.group(0) if lead else ""
    for m in pat.finditer(line):
        after = line[m.end():m.end() + 1]
        before = line[:m.start()].rstrip()[-1:]
        if re.match(r"\s*=(?!=)", line[m.end():]):
            continue  # assignment target: a definition, not a use
        if after in (".", "[") or before == "*":
            interp = True
            continue
        if lead_word in _INTERPRET_WORDS:
            interp = True
            continue
        if lead_word == "pass":
            fwd = True
            continue
        # inside a call argument list?
        opens = [c for c in _CALL_SITE.finditer(line[:m.start()])]
        if opens and line[opens[-1].end():m.start()].count("(") <= line[opens[-1].end():m.start()].count(")"):
            callee = opens[-1].group(1)
            if callee in _INTERPRET_WORDS:
                interp = True
            else:
                fwd = True
            continue
        interp = True
    return interp, fwd


def evidence_from_source(report: CrashReport, index: SourceIndex, crash_var: CrashVariable, spec: InterfaceSpec) -> Evidence:
    """Heuristic evidence from source text (``->`` is treated like ``.``)."""
    entry = crash_var.entry_function
    segs = parse_path(crash_var.unit)
    root = str(segs[0])
    tail = crash_var.unit[len(root):]
    n = len(report.frames)
    bodies = [(_norm(index.get(f.symbol).body) if index.has_source(f.symbol) and index.get(f.symbol).body else None)
              for f in report.frames]

    cutoff = n - 1
    alias: str | None = None
    for k in range(n):
        body = bodies[k]
        if body is None:
            continue
        for line in body.splitlines():
            args = _call_args(line, entry)
            if args is None:
                continue
            if root == "return":
                m = re.match(r"\s*(?:[\w\s\*]*?)([A-Za-z_]\w*)\s*=", line)
                alias = m.group(1) + tail if m else None
            else:
                params = [p.name for p in spec.function(entry).params]
                pos = params.index(root)
                alias = args[pos] + tail if pos < len(args) else None
            cutoff = k
            break
        if alias is not None:
            break
    aliases: dict[int, str | None] = {cutoff: alias}
    for k in range(cutoff - 1, -1, -1):
        caller, a = bodies[k + 1], aliases.get(k + 1)
        aliases[k] = None
        if caller is None or a is None:
            continue
        callee = report.frames[k].symbol
        for line in caller.splitlines():
            args = _call_args(line, callee)
            if args is None:
                continue
            params = _header_params(bodies[k]) if bodies[k] else [f"arg{i}" for i in range(len(args))]
            for i, arg in enumerate(args):
                if i < len(params) and is_path_prefix(arg, a):
                    aliases[k] = params[i] + a[len(arg):]
                    break
            break

    frames = []
    for k, f in enumerate(report.frames):
        a = aliases.get(k)
        interp = fwd = conflict = False
        first = crash_op = None
        body = bodies[k]
        if a is not None and body is not None:
            lines = body.splitlines()
            nxt = report.frames[k - 1].symbol if k > 0 else None
            for i, line in enumerate(lines[1:], start=0):
                li, lf = _occurrence_kind(line, a)
                if li or lf:
                    if first is None:
                        first = i
                    if li and lf:
                        conflict = True
                        logger.warning("%s: unit both interpreted and forwarded on one line; counted as interpretation",
                                       f.symbol)
                    interp |= li
                    fwd |= lf and not li
                if nxt is not None and _call_args(line, nxt) is not None:
                    crash_op = i
                    break
        elif a is not None and k == 0:
            interp = True  # library crash site handed the unit itself
        frames.append(FrameEvidence(k, f.symbol, a is not None, interp, fwd, first, crash_op, a, conflict))
    return Evidence("source", tuple(frames))


# ---------------------------------------------------------------------------
# Roles and site selection


@dataclass(frozen=True)
class Candidate:
    index: int
    symbol: str
    has_source: bool


@dataclass(frozen=True)
class RoleEntry:
    index: int | None  # stack index; None for the untrusted committer
    symbol: str
    role: Role
    has_source: bool
    candidate: bool
    insert_before: int | None = None
    unit_expr: str | None = None


@dataclass(frozen=True)
class RoleAssignment:
    crash_var: CrashVariable
    entries: tuple[RoleEntry, ...]
    candidates: tuple[str, ...]
    boundary_function: str | None
    evidence_layer: str
    warnings: tuple[str, ...] = ()

    def role_of(self, symbol: str) -> Role | None:
        for e in self.entries:
            if e.symbol == symbol:
                return e.role
        return None

    def as_map(self) -> dict[str, str]:
        return {e.symbol: e.role.value for e in self.entries}

    def to_dict(self) -> dict:
        return {
            "unit": self.crash_var.unit_label,
            "unit_path": self.crash_var.unit,
            "evidence": self.evidence_layer,
            "boundary_function": self.boundary_function,
            "candidates": list(self.candidates),
            "roles": [
                {"frame": e.index, "symbol": e.symbol, "role": e.role.value, "has_source": e.has_source,
                 "candidate": e.candidate}
                for e in self.entries
            ],
        }


def _has_source(symbol: str, default: bool, index: SourceIndex | None) -> bool:
    if index is not None and symbol in index:
        return index.has_source(symbol)
    return default


def boundary_candidates(
    report: CrashReport,
    policy: CompartmentPolicy,
    crash_var: CrashVariable,
    evidence: Evidence,
    index: SourceIndex | None = None,
) -> list[Candidate]:
    """Trusted frames holding the crash variable after the entry returned, crash site outward.

    A crash-site frame without source is left out; it can only act as the
    consumer the fallback rule routes around.
    """
    out = []
    for f, ev in zip(report.frames, evidence.frames):
        if not policy.is_trusted(f.symbol) or not ev.in_scope:
            continue
        src = _has_source(f.symbol, f.has_source, index)
        if f.index == 0 and not src:
            continue
        out.append(Candidate(f.index, f.symbol, src))
    if not out:
        raise AnalysisError("no trusted-side patch site: no trusted frame holds the crash variable")
    return out


def assign_roles(
    candidates: Sequence[Candidate],
    crash_var: CrashVariable,
    evidence: Evidence,
    report: CrashReport,
    policy: CompartmentPolicy,
    index: SourceIndex | None = None,
) -> RoleAssignment:
    ev = {e.index: e for e in evidence.frames}
    cand_idx = {c.index for c in candidates}
    members: list[Candidate] = list(candidates)
    site = report.frames[0]
    if 0 not in cand_idx and policy.is_trusted(site.symbol) and ev[0].in_scope:
        members.append(Candidate(0, site.symbol, _has_source(site.symbol, site.has_source, index)))
    members.sort(key=lambda c: c.index)

    interpreters = [c for c in members if c.index in cand_idx and ev[c.index].interprets]
    consume = max(interpreters, key=lambda c: c.index) if interpreters else None
    if consume is None and members[0].index == 0 and 0 not in cand_idx and ev[0].interprets:
        consume = members[0]

    warnings = tuple(f"{ev[c.index].symbol}: conflicting evidence resolved as interpretation"
                     for c in members if ev[c.index].conflict)
    entries = []
    for c in members:
        e = ev[c.index]
        if consume is not None and c.index == consume.index:
            role = Role.CONSUME
        elif c.index == 0:
            role = Role.CRASH_SITE
        elif e.interprets or e.forwards:
            role = Role.FORWARD
        else:
            role = Role.PRESENCE
        entries.append(RoleEntry(c.index, c.symbol, role, c.has_source, c.index in cand_idx, e.insertion_point, e.unit_expr))
    entries.append(RoleEntry(None, crash_var.entry_function, Role.COMMIT,
                             _has_source(crash_var.entry_function, True, index), False))
    return RoleAssignment(
        crash_var,
        tuple(entries),
        tuple(c.symbol for c in candidates),
        consume.symbol if consume is not None else None,
        evidence.layer,
        warnings,
    )


@dataclass(frozen=True)
class PatchSite:
    function: str
    role: Role
    frame: int
    justification: str
    insert_before: int | None
    unit_expr: str | None
    low_confidence: bool = False

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "role": self.role.value,
            "frame": self.frame,
            "justification": self.justification,
            "insert_before": self.insert_before,
            "unit_expr": self.unit_expr,
            "low_confidence": self.low_confidence,
        }


SITE_STRATEGIES = ("late", "early")


def select_patch_site(roles: RoleAssignment, strategy: str = "late") -> PatchSite:
    """Pick CONSUME, else the nearest FORWARD above it, else a PRESENCE frame.

    ``late`` prefers the frame closest to the crash site within a role tier,
    ``early`` the one farthest from it.
    """
    if strategy not in SITE_STRATEGIES:
        raise ValueError(f"unknown site strategy {strategy!r}")
    pick = min if strategy == "late" else max
    cands = [e for e in roles.entries if e.candidate]
    consume = next((e for e in roles.entries if e.role is Role.CONSUME), None)

    if consume is not None and consume.candidate and consume.has_source:
        return _site(consume, "CONSUME with source: patched where the unit is first interpreted")

    floor = consume.index if consume is not None else -1
    forwards = [e for e in cands if e.role is Role.FORWARD and e.has_source and e.index > floor]
    if forwards:
        chosen = pick(forwards, key=lambda e: e.index)
        if consume is not None:
            why = (f"fallback: consumer {consume.symbol} has no source; "
                   f"{chosen.symbol} is the {'last' if strategy == 'late' else 'first'} forwarder with source")
        else:
            why = f"no trusted consumer; {chosen.symbol} forwards the unit"
        return _site(chosen, why)

    presence = [e for e in cands if e.role is Role.PRESENCE and e.has_source]
    if presence:
        chosen = pick(presence, key=lambda e: e.index)
        return _site(chosen, f"fallback: no consumer or forwarder with source; {chosen.symbol} holds the unit in scope",
                     low=True)
    raise AnalysisError("human review required: no boundary candidate has modifiable source")


def _site(e: RoleEntry, why: str, low: bool = False) -> PatchSite:
    return PatchSite(e.symbol, e.role, e.index, why, e.insert_before, e.unit_expr, low)


@dataclass(frozen=True)
class Analysis:
    candidates: tuple[Candidate, ...]
    roles: RoleAssignment
    site: PatchSite | None
    error: str | None = None


def analyze(
    report: CrashReport,
    policy: CompartmentPolicy,
    crash_var: CrashVariable,
    evidence: Evidence,
    index: SourceIndex | None = None,
    strategy: str = "late",
) -> Analysis:
    cands = boundary_candidates(report, policy, crash_var, evidence, index)
    roles = assign_roles(cands, crash_var, evidence, report, policy, index)
    try:
        site = select_patch_site(roles, strategy)
    except AnalysisError as exc:
        return Analysis(tuple(cands), roles, None, str(exc))
    return Analysis(tuple(cands), roles, site)
