"""Desk-scale compartmentalized target: scenario model and abstract executor.

A scenario is a handful of functions written in a tiny op language, a flat
64-bit address space made of named regions, and the payload the untrusted
interface entry hands back to its trusted caller. :func:`execute` runs the
scenario from its start function; whenever a trusted function calls the
interface entry, the entry's parameters and return value are replaced by the
payload, which is how mutated data crosses the boundary.

Op grammar (one op per line; also the rendering used in source excerpts and
diffs)::

    deref(p, 24)            deref(p, 8, write)
    index(base, i, 8)       index(base, i, 8, 4)      # length, element size
    read_cstr(p, 4096)
    call f(a, b.c)          cfg = call f()
    guard is_pointer_mapped(p, 24) on_fail return
    use(x)  pass(x)  commit(x)  resolve(h)
    return
"""

from __future__ import annotations

import copy
import itertools
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Union

from .errors import ExecutionError, PatchError, ScenarioError
from .ingest import CrashKind, CrashReport, Frame, is_external_module, is_path_prefix, load_json, parse_path

DEFAULT_DEPTH_LIMIT = 64

INTERPRET_KINDS = frozenset({"deref", "index", "read_cstr", "use", "guard", "resolve"})
FORWARD_KINDS = frozenset({"call", "pass"})
OP_KINDS = INTERPRET_KINDS | FORWARD_KINDS | {"commit", "return"}

PREDICATES = {
    # name: allowed arities
    "is_pointer_mapped": (2,),
    "is_in_domain": (2, 3),
    "verify_format": (2,),
    "not_null": (1,),
    "at_least": (2,),
    "below": (2,),
    "true": (0,),
}
ORACLE_PREDICATES = frozenset({"is_pointer_mapped", "is_in_domain", "verify_format"})

_HANDLE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*):(\d+)")

# ---------------------------------------------------------------------------
# Ops


Arg = Union[str, int, frozenset]


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple[Arg, ...] = ()

    def render(self) -> str:
        return f"{self.name}({', '.join(_render_arg(a) for a in self.args)})"

    def refs(self) -> tuple[str, ...]:
        # the second argument of verify_format is a handle kind, not a variable
        args = self.args[:1] if self.name == "verify_format" else self.args
        return tuple(a for a in args if isinstance(a, str))


def _render_arg(a: Arg) -> str:
    if isinstance(a, frozenset):
        return "{" + ", ".join(str(v) for v in sorted(a)) + "}"
    return str(a)


@dataclass(frozen=True)
class Op:
    kind: str
    var: str | None = None
    size: int | None = None
    write: bool = False
    index_var: str | None = None
    elem: int = 1
    callee: str | None = None
    args: tuple[str, ...] = ()
    ret: str | None = None
    predicate: Predicate | None = None
    on_fail: str = "return"

    def refs(self) -> tuple[str, ...]:
        """Access paths this op reads."""
        if self.kind == "index":
            return (self.var, self.index_var)
        if self.kind == "call":
            return self.args
        if self.kind == "guard":
            return self.predicate.refs()
        if self.kind == "return":
            return ()
        return (self.var,)

    def render(self) -> str:
        k = self.kind
        if k == "deref":
            return f"deref({self.var}, {self.size}{', write' if self.write else ''})"
        if k == "index":
            tail = f", {self.elem}" if self.elem != 1 else ""
            return f"index({self.var}, {self.index_var}, {self.size}{tail})"
        if k == "read_cstr":
            return f"read_cstr({self.var}, {self.size})"
        if k == "call":
            call = f"call {self.callee}({', '.join(self.args)})"
            return f"{self.ret} = {call}" if self.ret else call
        if k == "guard":
            return f"guard {self.predicate.render()} on_fail {self.on_fail}"
        if k == "return":
            return "return"
        return f"{k}({self.var})"


_PATH_RE = r"[A-Za-z_][A-Za-z0-9_]*(?:\[\d+\])*(?:\.[A-Za-z_][A-Za-z0-9_]*(?:\[\d+\])*)*"
_INT_RE = r"-?(?:0x[0-9a-fA-F]+|\d+)"
_CALL = re.compile(rf"(?:(?P<ret>[A-Za-z_]\w*)\s*=\s*)?call\s+(?P<callee>[A-Za-z_]\w*)\s*\((?P<args>.*)\)")
_GUARD = re.compile(r"guard\s+(?P<name>[A-Za-z_]\w*)\s*\((?P<args>.*)\)\s+on_fail\s+(?P<on_fail>return|skip)")
_SIMPLE = re.compile(r"(?P<kind>[A-Za-z_]\w*)\s*\((?P<args>.*)\)")


def _split_args(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    out.append(cur.strip())
    return out


def _path_arg(text: str, line: str) -> str:
    if not re.fullmatch(_PATH_RE, text):
        raise ScenarioError(f"expected a variable path, got {text!r} in {line!r}")
    return text


def _int_arg(text: str, line: str) -> int:
    if not re.fullmatch(_INT_RE, text):
        raise ScenarioError(f"expected an integer, got {text!r} in {line!r}")
    return int(text, 0)


def _pred_arg(text: str, line: str) -> Arg:
    if text.startswith("{") and text.endswith("}"):
        return frozenset(_int_arg(v, line) for v in _split_args(text[1:-1]))
    if re.fullmatch(_INT_RE, text):
        return int(text, 0)
    return _path_arg(text, line)


def parse_predicate(name: str, args_text: str, line: str = "") -> Predicate:
    if name not in PREDICATES:
        raise ScenarioError(f"unknown guard predicate {name!r} in {line!r}")
    args = tuple(_pred_arg(a, line) for a in _split_args(args_text))
    if len(args) not in PREDICATES[name]:
        raise ScenarioError(f"predicate {name} takes {PREDICATES[name]} arguments, got {len(args)}")
    if args and name != "true" and not isinstance(args[0], str):
        raise ScenarioError(f"predicate {name}: first argument must be a variable path")
    return Predicate(name, args)


def parse_op(line: str) -> Op:
    """Parse one op in the textual grammar."""
    text = line.strip()
    if text == "return":
        return Op("return")
    m = _CALL.fullmatch(text)
    if m:
        args = tuple(_path_arg(a, text) for a in _split_args(m.group("args")))
        return Op("call", callee=m.group("callee"), args=args, ret=m.group("ret"))
    m = _GUARD.fullmatch(text)
    if m:
        return Op("guard", predicate=parse_predicate(m.group("name"), m.group("args"), text), on_fail=m.group("on_fail"))
    m = _SIMPLE.fullmatch(text)
    if not m:
        raise ScenarioError(f"unparseable op {text!r}")
    kind, args = m.group("kind"), _split_args(m.group("args"))
    if kind not in OP_KINDS or kind in ("call", "guard", "return"):
        raise ScenarioError(f"unknown op kind {kind!r}")
    if kind == "deref":
        if len(args) not in (2, 3) or (len(args) == 3 and args[2] != "write"):
            raise ScenarioError(f"deref takes (var, size[, write]): {text!r}")
        return Op("deref", var=_path_arg(args[0], text), size=_int_arg(args[1], text), write=len(args) == 3)
    if kind == "index":
        if len(args) not in (3, 4):
            raise ScenarioError(f"index takes (base, index, length[, elem]): {text!r}")
        elem = _int_arg(args[3], text) if len(args) == 4 else 1
        return Op("index", var=_path_arg(args[0], text), index_var=_path_arg(args[1], text),
                  size=_int_arg(args[2], text), elem=elem)
    if kind == "read_cstr":
        if len(args) != 2:
            raise ScenarioError(f"read_cstr takes (var, max): {text!r}")
        return Op("read_cstr", var=_path_arg(args[0], text), size=_int_arg(args[1], text))
    if len(args) != 1:
        raise ScenarioError(f"{kind} takes exactly one variable: {text!r}")
    return Op(kind, var=_path_arg(args[0], text))


# ---------------------------------------------------------------------------
# Scenario model


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    mapped: bool = True
    data: bytes = b""

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.mapped and self.base <= addr and addr + size <= self.base + self.size

    def byte_at(self, addr: int) -> int:
        off = addr - self.base
        return self.data[off] if off < len(self.data) else 0


@dataclass(frozen=True)
class FunctionBody:
    name: str
    compartment: str
    has_source: bool
    params: tuple[str, ...]
    ops: tuple[Op, ...]
    module: str = ""
    file: str | None = None
    line: int | None = None

    def render(self) -> list[str]:
        """Pseudo-C source lines; op ``i`` lives on line ``i + 2``."""
        return [f"function {self.name}({', '.join(self.params)}) {{"] + [f"    {op.render()}" for op in self.ops] + ["}"]

    def source_text(self) -> str:
        return "\n".join(self.render()) + "\n"


@dataclass(frozen=True)
class Payload:
    """Typed value tree handed across the interface, plus its provenance."""

    values: Mapping[str, Any]
    provenance: tuple[int, int] | None = None  # (seed, index); None means original

    def get(self, path: str) -> Any:
        node: Any = self.values
        for seg in parse_path(path):
            if isinstance(seg, int) or not isinstance(node, Mapping) or seg not in node:
                raise ExecutionError(f"payload has no value at {path!r}")
            node = node[seg]
        return node

    def with_value(self, path: str, value: Any, provenance: tuple[int, int] | None = None) -> "Payload":
        self.get(path)
        values = copy.deepcopy(dict(self.values))
        node = values
        segs = parse_path(path)
        for seg in segs[:-1]:
            node = node[seg]
        node[segs[-1]] = value
        return Payload(values, provenance)

    def to_dict(self) -> dict:
        return {"values": _encode_values(self.values), "provenance": None if self.provenance is None else list(self.provenance)}

    @classmethod
    def from_dict(cls, tree: Mapping) -> "Payload":
        prov = tree.get("provenance")
        return cls(_decode_values(tree["values"]), None if prov is None else (int(prov[0]), int(prov[1])))


def _encode_values(node: Any) -> Any:
    if isinstance(node, Mapping):
        return {k: _encode_values(v) for k, v in node.items()}
    if isinstance(node, str):
        return "h:" + node
    return node


def _decode_values(node: Any) -> Any:
    """Integers may be written as hex strings; ``h:`` prefixes mark handles."""
    if isinstance(node, Mapping):
        return {k: _decode_values(v) for k, v in node.items()}
    if isinstance(node, str):
        if node.startswith("h:"):
            return node[2:]
        try:
            return int(node, 0)
        except ValueError:
            return node
    if isinstance(node, bool) or not isinstance(node, int):
        raise ScenarioError(f"unsupported payload value {node!r}")
    return node


def same_shape(a: Any, b: Any) -> bool:
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        return (
            isinstance(a, Mapping) and isinstance(b, Mapping) and a.keys() == b.keys()
            and all(same_shape(a[k], b[k]) for k in a)
        )
    return isinstance(a, str) == isinstance(b, str)


@dataclass(frozen=True)
class Scenario:
    name: str
    start: str
    interface_entry: str
    functions: Mapping[str, FunctionBody]
    memory: tuple[Region, ...]
    globals: Mapping[str, Any]
    payload_template: Payload
    handles: frozenset[str] = frozenset()
    patches: tuple[str, ...] = ()

    @property
    def entry(self) -> FunctionBody:
        return self.functions[self.interface_entry]

    def region_at(self, addr: int) -> Region | None:
        for r in self.memory:
            if r.mapped and r.base <= addr < r.base + r.size:
                return r
        return None

    def is_mapped(self, addr: int, size: int = 1) -> bool:
        return any(r.contains(addr, size) for r in self.memory)

    def original_payload(self) -> Payload:
        return self.payload_template


def load_scenario(text: Union[str, bytes, Mapping]) -> Scenario:
    """Build a scenario from its JSON document and verify every invariant."""
    tree = text if isinstance(text, Mapping) else load_json(text, "scenario")
    try:
        return _build_scenario(tree)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ScenarioError(f"scenario: malformed document ({exc})") from None


def _build_scenario(tree: Mapping) -> Scenario:
    if not isinstance(tree, Mapping):
        raise ScenarioError("scenario: top level must be an object")
    name = tree["name"]
    entry = tree["interface_entry"]
    start = tree.get("start", entry)

    regions = []
    for rname, r in sorted(tree.get("memory", {}).items(), key=lambda kv: kv[0]):
        data = r.get("bytes", "")
        raw = data.encode("latin-1") if isinstance(data, str) else bytes(data)
        size = int(r["size"])
        if len(raw) > size:
            raise ScenarioError(f"region {rname!r}: {len(raw)} bytes do not fit size {size}")
        regions.append(Region(rname, _int(r["base"]), size, bool(r.get("mapped", True)), raw))
    mapped = sorted((r for r in regions if r.mapped), key=lambda r: r.base)
    for a, b in zip(mapped, mapped[1:]):
        if a.base + a.size > b.base:
            raise ScenarioError(f"regions {a.name!r} and {b.name!r} overlap")

    functions = {}
    for fname, body in tree["functions"].items():
        ops = []
        for i, line in enumerate(body.get("ops", [])):
            try:
                ops.append(parse_op(line))
            except ScenarioError as exc:
                raise ScenarioError(f"{fname} op {i}: {exc}") from None
        module = body.get("module", "")
        functions[fname] = FunctionBody(
            fname,
            body.get("compartment", ""),
            bool(body.get("has_source", not is_external_module(module))),
            tuple(body.get("params", [])),
            tuple(ops),
            module,
            body.get("file"),
            body.get("line"),
        )
    if entry not in functions:
        raise ScenarioError(f"interface entry {entry!r} is not a declared function")
    if start not in functions:
        raise ScenarioError(f"start function {start!r} is not declared")

    payload = Payload(_decode_values(tree.get("payload", {})))
    scen = Scenario(
        name,
        start,
        entry,
        functions,
        tuple(regions),
        _decode_values(tree.get("globals", {})),
        payload,
        frozenset(tree.get("handles", [])),
    )
    _verify(scen)
    return scen


def _int(v: Any) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def _verify(s: Scenario) -> None:
    entry = s.entry
    expected = set(entry.params) | ({"return"} if "return" in s.payload_template.values else set())
    if set(s.payload_template.values) != expected:
        raise ScenarioError(
            f"payload keys {sorted(s.payload_template.values)} do not match entry parameters {sorted(expected)}"
        )
    if s.start != s.interface_entry:
        missing = [p for p in s.functions[s.start].params if p not in s.globals]
        if missing:
            raise ScenarioError(f"start function parameters without globals: {missing}")
    for fn in s.functions.values():
        verify_body(s, fn)
    _check_call_depth(s)


def verify_body(s: Scenario, fn: FunctionBody) -> None:
    bound = set(fn.params)
    for i, op in enumerate(fn.ops):
        for ref in op.refs():
            root = str(parse_path(ref)[0])
            if root not in bound:
                raise ScenarioError(f"{fn.name} op {i}: undeclared variable {root!r}")
        if op.kind == "call":
            callee = s.functions.get(op.callee)
            if callee is None:
                raise ScenarioError(f"{fn.name} op {i}: dangling callee {op.callee!r}")
            if len(op.args) != len(callee.params):
                raise ScenarioError(f"{fn.name} op {i}: {op.callee} expects {len(callee.params)} arguments")
            if op.ret:
                if op.callee != s.interface_entry or "return" not in s.payload_template.values:
                    raise ScenarioError(f"{fn.name} op {i}: only the interface entry returns a value")
                bound.add(op.ret)


def _check_call_depth(s: Scenario) -> None:
    edges = {n: sorted({op.callee for op in f.ops if op.kind == "call"}) for n, f in s.functions.items()}
    state: dict[str, int] = {}

    def depth(n: str, stack: int) -> int:
        if stack > DEFAULT_DEPTH_LIMIT:
            raise ScenarioError(f"static call chain deeper than {DEFAULT_DEPTH_LIMIT}")
        if state.get(n) == 1:
            raise ScenarioError(f"cyclic static call chain through {n!r}")
        if n in memo:
            return memo[n]
        state[n] = 1
        d = 1 + max((depth(c, stack + 1) for c in edges[n]), default=0)
        state[n] = 2
        memo[n] = d
        return d

    memo: dict[str, int] = {}
    d = depth(s.start, 1)
    if d > DEFAULT_DEPTH_LIMIT:
        raise ScenarioError(f"static call chain deeper than {DEFAULT_DEPTH_LIMIT}")


def load_scenario_file(path) -> Scenario:
    with open(path, "rb") as fh:
        return load_scenario(fh.read())


# ---------------------------------------------------------------------------
# Execution


@dataclass(frozen=True)
class TraceEvent:
    frame: int  # activation id
    function: str
    op_index: int  # -1 for enter/inject bookkeeping events
    kind: str  # op kind, "enter" or "inject"
    touched: tuple[tuple[str, str | None], ...]  # (local expression, payload origin)

    def to_list(self) -> list:
        return [self.frame, self.function, self.op_index, self.kind, [list(t) for t in self.touched]]


@dataclass(frozen=True)
class Crash:
    kind: CrashKind
    fault_address: int
    access_size: int
    faulting_op: tuple[str, int]
    stack: tuple[str, ...]  # crash site first
    chain: tuple[int, ...]  # activation ids aligned with stack
    lines: tuple[int | None, ...]


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # "ok" | "crash"
    crash: Crash | None
    trace: tuple[TraceEvent, ...]

    @property
    def crashed(self) -> bool:
        return self.status == "crash"

    def to_report(self, scenario: Scenario) -> CrashReport:
        if self.crash is None:
            raise ExecutionError("no crash to report")
        c = self.crash
        frames = []
        for i, (sym, line) in enumerate(zip(c.stack, c.lines)):
            fn = scenario.functions[sym]
            frames.append(Frame(i, sym, fn.module, fn.has_source, fn.file, line))
        return CrashReport(c.kind, c.fault_address, c.access_size, tuple(frames))

    def to_json(self) -> str:
        crash = None
        if self.crash:
            c = self.crash
            crash = {
                "kind": c.kind.value,
                "fault_address": hex(c.fault_address),
                "access_size": c.access_size,
                "faulting_op": list(c.faulting_op),
                "stack": list(c.stack),
            }
        return json.dumps({"status": self.status, "crash": crash, "trace": [e.to_list() for e in self.trace]})


@dataclass
class _Val:
    value: Any
    origin: str | None


class _CrashSignal(Exception):
    def __init__(self, kind: CrashKind, addr: int, size: int):
        self.kind, self.addr, self.size = kind, addr, size


class _Machine:
    def __init__(self, s: Scenario, payload: Payload, depth_limit: int):
        self.s = s
        self.payload = payload
        self.depth_limit = depth_limit
        self.trace: list[TraceEvent] = []
        self.ids = itertools.count()
        self.chain: list[tuple[str, int, int]] = []  # (function, activation, current op)

    def lookup(self, env: dict[str, _Val], path: str) -> _Val:
        segs = parse_path(path)
        val = env.get(str(segs[0]))
        if val is None:
            raise ExecutionError(f"unbound variable {segs[0]!r}")
        value, origin = val.value, val.origin
        for seg in segs[1:]:
            if isinstance(seg, int) or not isinstance(value, Mapping) or seg not in value:
                raise ExecutionError(f"cannot resolve {path!r}: no field {seg!r}")
            value = value[seg]
            origin = f"{origin}.{seg}" if origin else None
        return _Val(value, origin)

    def run(self) -> ExecutionOutcome:
        s = self.s
        try:
            if s.start == s.interface_entry:
                env = {p: _Val(copy.deepcopy(self.payload.values[p]), p) for p in s.entry.params}
            else:
                start = s.functions[s.start]
                env = {p: _Val(copy.deepcopy(s.globals[p]), None) for p in start.params}
            self.call(s.start, env)
        except _CrashSignal as sig:
            stack = tuple(f for f, _, _ in reversed(self.chain))
            ids = tuple(a for _, a, _ in reversed(self.chain))
            lines = tuple(self._line(f, i) for f, _, i in reversed(self.chain))
            fn, _, op = self.chain[-1]
            crash = Crash(sig.kind, sig.addr, sig.size, (fn, op), stack, ids, lines)
            return ExecutionOutcome("crash", crash, tuple(self.trace))
        return ExecutionOutcome("ok", None, tuple(self.trace))

    def _line(self, fn: str, op: int) -> int | None:
        line = self.s.functions[fn].line
        return None if line is None else line + op + 1

    def call(self, name: str, env: dict[str, _Val]) -> None:
        if len(self.chain) >= self.depth_limit:
            raise ExecutionError(f"call depth limit {self.depth_limit} exceeded entering {name}")
        fn = self.s.functions[name]
        act = next(self.ids)
        self.chain.append((name, act, -1))
        self.trace.append(TraceEvent(act, name, -1, "enter", tuple((p, env[p].origin) for p in fn.params)))
        skip = False
        for i, op in enumerate(fn.ops):
            if skip:
                skip = False
                continue
            self.chain[-1] = (name, act, i)
            touched = tuple((r, self.lookup(env, r).origin) for r in op.refs())
            self.trace.append(TraceEvent(act, name, i, op.kind, touched))
            k = op.kind
            if k == "return":
                break
            if k == "deref":
                self.check_mem(self.lookup(env, op.var).value, op.size, op.write)
            elif k == "index":
                base = self.lookup(env, op.var).value
                idx = self.lookup(env, op.index_var).value
                if not isinstance(idx, int):
                    raise ExecutionError(f"{name} op {i}: index is not an integer")
                base_addr = base if isinstance(base, int) else 0
                if idx < 0 or idx >= op.size:
                    raise _CrashSignal(CrashKind.OVERFLOW_READ, base_addr + idx * op.elem, op.elem)
                if isinstance(base, int):
                    self.check_mem(base + idx * op.elem, op.elem, False)
            elif k == "read_cstr":
                self.read_cstr(self.lookup(env, op.var).value, op.size)
            elif k == "resolve":
                h = self.lookup(env, op.var).value
                if not isinstance(h, str) or h not in self.s.handles:
                    raise _CrashSignal(CrashKind.ABORT, 0, 0)
            elif k == "guard":
                if not evaluate(op.predicate, env, self):
                    if op.on_fail == "return":
                        break
                    skip = True
            elif k == "call":
                self.do_call(op, env, act)
        self.chain.pop()

    def do_call(self, op: Op, env: dict[str, _Val], act: int) -> None:
        s = self.s
        callee = s.functions[op.callee]
        if op.callee == s.interface_entry:
            # the untrusted side runs un-simulated; its outputs are the payload
            ent = next(self.ids)
            self.trace.append(TraceEvent(ent, op.callee, -1, "enter", tuple((p, p) for p in callee.params)))
            rebound = []
            for arg, param in zip(op.args, callee.params):
                if "." not in arg and "[" not in arg:
                    env[arg] = _Val(copy.deepcopy(self.payload.values[param]), param)
                    rebound.append((arg, param))
            if op.ret:
                env[op.ret] = _Val(copy.deepcopy(self.payload.values["return"]), "return")
                rebound.append((op.ret, "return"))
            self.trace.append(TraceEvent(act, self.chain[-1][0], self.chain[-1][2], "inject", tuple(rebound)))
            return
        vals = [self.lookup(env, a) for a in op.args]
        self.call(op.callee, {p: _Val(copy.deepcopy(v.value), v.origin) for p, v in zip(callee.params, vals)})

    def check_mem(self, addr: Any, size: int, write: bool) -> None:
        if not isinstance(addr, int):
            return  # structured values stand for trusted objects
        if not self.s.is_mapped(addr, size):
            raise _CrashSignal(CrashKind.SEGV_WRITE if write else CrashKind.SEGV_READ, addr, size)

    def read_cstr(self, addr: Any, limit: int) -> None:
        if not isinstance(addr, int):
            return
        region = self.s.region_at(addr)
        if region is None:
            raise _CrashSignal(CrashKind.SEGV_READ, addr, 1)
        end = region.base + region.size
        for i in range(limit):
            a = addr + i
            if a >= end:
                raise _CrashSignal(CrashKind.OVERFLOW_READ, a, 1)
            if region.byte_at(a) == 0:
                return


def evaluate(pred: Predicate, env: Mapping[str, _Val], machine: _Machine) -> bool:
    """Evaluate a guard predicate in the given local environment."""
    refs = pred.refs()
    vals = [machine.lookup(env, a).value if isinstance(a, str) and a in refs else a for a in pred.args]
    name = pred.name
    if name == "true":
        return True
    v = vals[0]
    if name == "is_pointer_mapped":
        return not isinstance(v, int) or machine.s.is_mapped(v, vals[1])
    if name == "not_null":
        return v != 0 and v != ""
    if name == "verify_format":
        if not isinstance(v, str):
            return False
        m = _HANDLE.fullmatch(v)
        return bool(m) and m.group(1) == str(pred.args[1]) and v in machine.s.handles
    if not isinstance(v, int):
        return False
    if name == "is_in_domain":
        if len(vals) == 2:
            return v in vals[1]
        return vals[1] <= v < vals[2]
    if name == "at_least":
        return v >= vals[1]
    if name == "below":
        return v < vals[1]
    raise ExecutionError(f"unknown predicate {name!r}")


def execute(s: Scenario, p: Payload, depth_limit: int = DEFAULT_DEPTH_LIMIT) -> ExecutionOutcome:
    """Run ``s`` on payload ``p``; deterministic and side-effect free."""
    if not same_shape(s.payload_template.values, p.values):
        raise ExecutionError(f"payload shape does not match scenario {s.name!r}")
    return _Machine(s, p, depth_limit).run()


# ---------------------------------------------------------------------------
# Guard patches


@dataclass(frozen=True)
class GuardPatch:
    target_function: str
    insert_before_op_index: int
    predicate: Predicate
    on_fail: str = "return"

    def op(self) -> Op:
        return Op("guard", predicate=self.predicate, on_fail=self.on_fail)

    def describe(self) -> str:
        return f"{self.target_function}@{self.insert_before_op_index}: {self.op().render()}"


def apply_guard_patch(s: Scenario, patch: GuardPatch) -> Scenario:
    """Return a copy of ``s`` with the guard inserted; ``s`` is left untouched."""
    fn = s.functions.get(patch.target_function)
    if fn is None:
        raise PatchError(f"unknown function {patch.target_function!r}")
    if not fn.has_source:
        raise PatchError(f"{fn.name}: no source available (library function cannot be modified)")
    if not 0 <= patch.insert_before_op_index < len(fn.ops):
        raise PatchError(f"{fn.name}: op index {patch.insert_before_op_index} out of range 0..{len(fn.ops) - 1}")
    if patch.on_fail not in ("return", "skip"):
        raise PatchError(f"unknown on_fail action {patch.on_fail!r}")
    ops = list(fn.ops)
    ops.insert(patch.insert_before_op_index, patch.op())
    new_fn = replace(fn, ops=tuple(ops))
    functions = dict(s.functions)
    functions[fn.name] = new_fn
    patched = replace(s, functions=functions, patches=s.patches + (patch.describe(),))
    try:
        verify_body(patched, new_fn)
    except ScenarioError as exc:
        raise PatchError(f"guard does not fit {fn.name}: {exc}") from None
    return patched


def source_index(s: Scenario, policy) -> "SourceIndex":
    """Source index of a scenario: rendered bodies for functions that have source."""
    from .ingest import build_source_index

    functions = {}
    for name, fn in s.functions.items():
        span = [fn.line, fn.line + len(fn.ops) + 1] if fn.line is not None else None
        functions[name] = {
            "available": fn.has_source,
            "body": fn.source_text() if fn.has_source else None,
            "file": fn.file,
            "lines": span,
        }
    return build_source_index(functions, policy)
