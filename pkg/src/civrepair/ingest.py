"""Parsers and normalized types for the framework inputs.

Covers the compartmentalization policy (with its interface description),
sanitizer crash reports, fuzzer mutation logs and the source index. Every
parser raises :class:`~civrepair.errors.ParseError` on bad input and never
lets a lower-level exception escape.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import re
import shlex
import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Union

from .errors import ParseError

logger = logging.getLogger(__name__)

GOALS = ("confidentiality", "integrity", "availability")

# ---------------------------------------------------------------------------
# Access paths


_SEGMENT = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)((?:\[\d+\])*)")


def parse_path(text: str) -> tuple[Union[str, int], ...]:
    """Split ``a.b[2].c`` into ``("a", "b", 2, "c")``."""
    if not isinstance(text, str) or not text:
        raise ParseError(f"empty access path")
    segments: list[Union[str, int]] = []
    for part in text.split("."):
        m = _SEGMENT.fullmatch(part)
        if not m:
            raise ParseError(f"malformed access path segment {part!r} in {text!r}")
        segments.append(m.group(1))
        segments.extend(int(i) for i in re.findall(r"\[(\d+)\]", m.group(2)))
    return tuple(segments)


def format_path(segments: Iterable[Union[str, int]]) -> str:
    out = ""
    for seg in segments:
        if isinstance(seg, int):
            out += f"[{seg}]"
        else:
            out += ("." if out else "") + seg
    return out


def is_path_prefix(prefix: str, path: str) -> bool:
    """True when ``prefix`` names ``path`` or one of its enclosing values."""
    return path == prefix or path.startswith(prefix + ".") or path.startswith(prefix + "[")


# ---------------------------------------------------------------------------
# Interface types


@dataclass(frozen=True)
class PointerType:
    target: str
    size: int
    kind = "pointer"

    def to_dict(self) -> dict:
        return {"kind": "pointer", "target": self.target, "size": self.size}


@dataclass(frozen=True)
class ScalarType:
    """Integer scalar with a closed domain: half-open range or explicit set."""

    lo: int | None = None
    hi: int | None = None
    values: frozenset[int] | None = None
    kind = "scalar"

    def contains(self, value: int) -> bool:
        if self.values is not None:
            return value in self.values
        if self.lo is not None and value < self.lo:
            return False
        if self.hi is not None and value >= self.hi:
            return False
        return True

    def to_dict(self) -> dict:
        if self.values is not None:
            return {"kind": "scalar", "values": sorted(self.values)}
        return {"kind": "scalar", "range": [self.lo, self.hi]}


@dataclass(frozen=True)
class StructType:
    name: str
    fields: tuple[tuple[str, "IfaceType"], ...]
    kind = "structured"

    def field(self, name: str) -> "IfaceType | None":
        for fname, ftype in self.fields:
            if fname == name:
                return ftype
        return None

    def to_dict(self) -> dict:
        return {
            "kind": "structured",
            "name": self.name,
            "fields": {n: t.to_dict() for n, t in self.fields},
        }


@dataclass(frozen=True)
class HandleType:
    handle_kind: str
    kind = "handle"

    def to_dict(self) -> dict:
        return {"kind": "handle", "handle_kind": self.handle_kind}


IfaceType = Union[PointerType, ScalarType, StructType, HandleType]


def parse_iface_type(node: Any, where: str = "type") -> IfaceType:
    if not isinstance(node, dict) or "kind" not in node:
        raise ParseError(f"{where}: interface type must be an object with 'kind'")
    kind = node["kind"]
    try:
        if kind == "pointer":
            size = int(node.get("size", 1))
            if size <= 0:
                raise ParseError(f"{where}: pointer target size must be positive")
            return PointerType(sys.intern(str(node.get("target", "void"))), size)
        if kind == "scalar":
            if "values" in node:
                return ScalarType(values=frozenset(int(v) for v in node["values"]))
            lo, hi = node.get("range", [None, None])
            lo = None if lo is None else int(lo)
            hi = None if hi is None else int(hi)
            if lo is not None and hi is not None and lo >= hi:
                raise ParseError(f"{where}: empty scalar range [{lo}, {hi})")
            return ScalarType(lo=lo, hi=hi)
        if kind == "structured":
            raw = node.get("fields")
            if not isinstance(raw, dict) or not raw:
                raise ParseError(f"{where}: structured type needs a non-empty 'fields' object")
            fields = tuple(
                (sys.intern(str(k)), parse_iface_type(v, f"{where}.{k}")) for k, v in raw.items()
            )
            return StructType(sys.intern(str(node.get("name", "struct"))), fields)
        if kind in ("handle", "opaque_handle"):
            return HandleType(sys.intern(str(node.get("handle_kind", "handle"))))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{where}: {exc}") from None
    raise ParseError(f"{where}: unknown interface type kind {kind!r}")


@dataclass(frozen=True)
class Param:
    name: str
    type: IfaceType


@dataclass(frozen=True)
class InterfaceFunction:
    name: str
    owner_compartment: str
    params: tuple[Param, ...]
    returns: IfaceType | None = None

    def slot(self, name: str) -> IfaceType | None:
        """Type of a parameter, or of the return value for ``"return"``."""
        if name == "return":
            return self.returns
        for p in self.params:
            if p.name == name:
                return p.type
        return None

    def slots(self) -> list[tuple[str, IfaceType]]:
        out = [(p.name, p.type) for p in self.params]
        if self.returns is not None:
            out.append(("return", self.returns))
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "owner_compartment": self.owner_compartment,
            "params": [{"name": p.name, "type": p.type.to_dict()} for p in self.params],
            "returns": None if self.returns is None else self.returns.to_dict(),
        }


@dataclass(frozen=True)
class ResolvedPath:
    function: InterfaceFunction
    segments: tuple[Union[str, int], ...]
    leaf: IfaceType
    nested: bool  # leaf sits inside a structured slot


@dataclass(frozen=True)
class InterfaceSpec:
    functions: tuple[InterfaceFunction, ...]

    def function(self, name: str) -> InterfaceFunction:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise ParseError(f"interface has no function {name!r}")

    def resolve(self, entry: str, path: str) -> ResolvedPath:
        fn = self.function(entry)
        segments = parse_path(path)
        current = fn.slot(str(segments[0]))
        if current is None:
            raise ParseError(f"{entry} has no parameter or return slot {segments[0]!r}")
        for seg in segments[1:]:
            if not isinstance(current, StructType) or isinstance(seg, int):
                raise ParseError(f"path {path!r} does not resolve against {entry}")
            nxt = current.field(seg)
            if nxt is None:
                raise ParseError(f"path {path!r}: no field {seg!r} in {current.name}")
            current = nxt
        return ResolvedPath(fn, segments, current, nested=len(segments) > 1)

    def to_dict(self) -> dict:
        return {"functions": [f.to_dict() for f in self.functions]}


def parse_interface(node: Any) -> InterfaceSpec:
    if not isinstance(node, dict) or not isinstance(node.get("functions"), list):
        raise ParseError("interface: expected an object with a 'functions' list")
    functions = []
    for i, raw in enumerate(node["functions"]):
        where = f"interface.functions[{i}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str):
            raise ParseError(f"{where}: function needs a 'name'")
        params = []
        seen = set()
        for j, p in enumerate(raw.get("params") or []):
            if not isinstance(p, dict) or not isinstance(p.get("name"), str):
                raise ParseError(f"{where}.params[{j}]: parameter needs a 'name'")
            if p["name"] in seen or p["name"] == "return":
                raise ParseError(f"{where}: duplicate or reserved parameter name {p['name']!r}")
            seen.add(p["name"])
            params.append(Param(sys.intern(p["name"]), parse_iface_type(p.get("type"), f"{where}.{p['name']}")))
        returns = raw.get("returns")
        functions.append(
            InterfaceFunction(
                sys.intern(raw["name"]),
                sys.intern(str(raw.get("owner_compartment", ""))),
                tuple(params),
                None if returns is None else parse_iface_type(returns, f"{where}.returns"),
            )
        )
    return InterfaceSpec(tuple(functions))


# ---------------------------------------------------------------------------
# Compartment policy


class TrustModel(str, Enum):
    SANDBOX = "sandbox"
    SAFEBOX = "safebox"
    MUTUAL_DISTRUST = "mutual-distrust"


@dataclass(frozen=True)
class Compartment:
    name: str
    trusted: bool
    code_units: tuple[str, ...]


@dataclass(frozen=True)
class CompartmentPolicy:
    compartments: tuple[Compartment, ...]
    trust_model: TrustModel
    security_goals: frozenset[str]
    interface: InterfaceSpec | None = None

    @property
    def untrusted(self) -> Compartment:
        return next(c for c in self.compartments if not c.trusted)

    @property
    def default_trusted(self) -> Compartment:
        return next(c for c in self.compartments if c.trusted)

    def compartment(self, name: str) -> Compartment:
        for c in self.compartments:
            if c.name == name:
                return c
        raise KeyError(name)

    def attribute(self, symbol: str) -> tuple[str, bool]:
        """Compartment owning ``symbol`` and whether it was attributed by default.

        A symbol matching no code-unit glob lands in the first trusted
        compartment and is flagged.
        """
        matches = [c.name for c in self.compartments if any(fnmatch.fnmatchcase(symbol, g) for g in c.code_units)]
        if len(matches) > 1:
            raise ParseError(f"symbol {symbol!r} matches code units of several compartments: {matches}")
        if matches:
            return matches[0], False
        return self.default_trusted.name, True

    def is_trusted(self, symbol: str) -> bool:
        return self.compartment(self.attribute(symbol)[0]).trusted

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "compartments": [
                {"name": c.name, "trust": "trusted" if c.trusted else "untrusted", "code_units": list(c.code_units)}
                for c in self.compartments
            ],
            "trust_model": self.trust_model.value,
            "security_goals": [g for g in GOALS if g in self.security_goals],
        }
        if self.interface is not None:
            out["interface"] = self.interface.to_dict()
        return out


def load_json(text: Union[str, bytes], what: str) -> Any:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{what}: not UTF-8 text ({exc.reason})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: {exc.msg}", exc.lineno, exc.colno) from None
    except RecursionError:
        raise ParseError(f"{what}: document nested too deeply") from None


def parse_policy(text: Union[str, bytes, Mapping]) -> CompartmentPolicy:
    """Parse a policy document (JSON text or an already-decoded tree)."""
    tree = text if isinstance(text, Mapping) else load_json(text, "policy")
    if not isinstance(tree, Mapping):
        raise ParseError("policy: top level must be an object")
    raw = tree.get("compartments")
    if not isinstance(raw, list) or not raw:
        raise ParseError("policy: 'compartments' must be a non-empty list")
    compartments = []
    names = set()
    for i, c in enumerate(raw):
        if not isinstance(c, Mapping) or not isinstance(c.get("name"), str) or not c["name"]:
            raise ParseError(f"policy: compartments[{i}] needs a 'name'")
        if c["name"] in names:
            raise ParseError(f"policy: duplicate compartment {c['name']!r}")
        names.add(c["name"])
        trust = c.get("trust")
        if trust not in ("trusted", "untrusted"):
            raise ParseError(f"policy: compartment {c['name']!r} has invalid trust {trust!r}")
        units = c.get("code_units", [])
        if not isinstance(units, list) or not all(isinstance(u, str) and u for u in units):
            raise ParseError(f"policy: compartment {c['name']!r} code_units must be a list of globs")
        compartments.append(Compartment(sys.intern(c["name"]), trust == "trusted", tuple(sys.intern(u) for u in units)))

    untrusted = [c.name for c in compartments if not c.trusted]
    if not untrusted:
        raise ParseError("policy: no attack surface (no untrusted compartment)")
    if len(untrusted) > 1:
        raise ParseError(f"policy: exactly one untrusted compartment supported, got {untrusted}")
    _check_partition(compartments)

    try:
        model = TrustModel(tree.get("trust_model"))
    except ValueError:
        raise ParseError(f"policy: unknown trust_model {tree.get('trust_model')!r}") from None

    goals = tree.get("security_goals", [])
    if not isinstance(goals, list) or not all(g in GOALS for g in goals):
        raise ParseError(f"policy: security_goals must be a subset of {list(GOALS)}")

    interface = None
    if tree.get("interface") is not None:
        interface = parse_interface(tree["interface"])
        for fn in interface.functions:
            if fn.owner_compartment not in names:
                raise ParseError(f"interface function {fn.name!r} owned by unknown compartment {fn.owner_compartment!r}")
    return CompartmentPolicy(tuple(compartments), model, frozenset(goals), interface)


def _check_partition(compartments: list[Compartment]) -> None:
    owner: dict[str, str] = {}
    for c in compartments:
        for unit in c.code_units:
            if unit in owner and owner[unit] != c.name:
                raise ParseError(f"policy: code unit {unit!r} claimed by {owner[unit]!r} and {c.name!r}")
            owner[unit] = c.name
    for c in compartments:
        for other in compartments:
            if other is c:
                continue
            for unit in c.code_units:
                if not any(ch in unit for ch in "*?[") and any(fnmatch.fnmatchcase(unit, g) for g in other.code_units):
                    raise ParseError(f"policy: code unit {unit!r} of {c.name!r} also matches {other.name!r}")


# ---------------------------------------------------------------------------
# Crash reports


class CrashKind(str, Enum):
    SEGV_READ = "segv-read"
    SEGV_WRITE = "segv-write"
    OVERFLOW_READ = "overflow-read"
    OVERFLOW_WRITE = "overflow-write"
    ABORT = "abort"


@dataclass(frozen=True)
class Frame:
    index: int
    symbol: str
    module: str = ""
    has_source: bool = True
    file: str | None = None
    line: int | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "symbol": self.symbol,
            "module": self.module,
            "has_source": self.has_source,
            "file": self.file,
            "line": self.line,
        }


@dataclass(frozen=True)
class CrashReport:
    kind: CrashKind
    fault_address: int
    access_size: int
    frames: tuple[Frame, ...]

    @property
    def crash_site(self) -> Frame:
        return self.frames[0]

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(f.symbol for f in self.frames)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "fault_address": hex(self.fault_address),
            "access_size": self.access_size,
            "frames": [f.to_dict() for f in self.frames],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def is_external_module(module: str) -> bool:
    """Shared objects and absolute library paths carry no application source."""
    return bool(module) and (module.startswith("/") or ".so" in module or module.endswith(".dll"))


_FRAME_LINE = re.compile(
    r"#(?P<index>\d+)\s+(?P<addr>0x[0-9a-fA-F]+)\s+in\s+(?P<symbol>[^\s(]+)"
    r"(?:\s+\((?P<module>[^)+]*)(?:\+0x[0-9a-fA-F]+)?\))?"
    r"(?:\s+(?P<file>[^\s:]+):(?P<line>\d+)(?::\d+)?)?\s*"
)
_ASAN_HEADER = re.compile(
    r"AddressSanitizer:\s*(?P<what>[A-Za-z-]+)\s+on\s+(?:unknown\s+)?address\s+(?P<addr>0x[0-9a-fA-F]+)"
)
_ACCESS = re.compile(r"\b(?P<rw>READ|WRITE)\b(?:\s+of\s+size\s+(?P<size>\d+))?")


def parse_sanitizer_report(text: Union[str, bytes]) -> CrashReport:
    """Parse a normalized JSON crash report or an ASan-style frame listing."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"report: not UTF-8 text ({exc.reason})") from None
    if text.lstrip().startswith("{"):
        return _report_from_tree(load_json(text, "report"))
    return _report_from_asan(text)


def _report_from_tree(tree: Any) -> CrashReport:
    if not isinstance(tree, Mapping):
        raise ParseError("report: top level must be an object")
    try:
        kind = CrashKind(tree.get("kind"))
    except ValueError:
        raise ParseError(f"report: unknown crash kind {tree.get('kind')!r}") from None
    addr = tree.get("fault_address", "0x0")
    try:
        fault = int(addr, 16) if isinstance(addr, str) else int(addr)
        size = int(tree.get("access_size", 0))
    except (TypeError, ValueError):
        raise ParseError(f"report: bad fault_address/access_size") from None
    raw = tree.get("frames")
    if not isinstance(raw, list) or not raw:
        raise ParseError("report: empty stack")
    frames = []
    for i, f in enumerate(raw):
        if not isinstance(f, Mapping) or not isinstance(f.get("symbol"), str) or not f["symbol"]:
            raise ParseError(f"report: frames[{i}] needs a 'symbol'")
        if f.get("index", i) != i:
            raise ParseError(f"report: frame indices must be contiguous from 0 (got {f.get('index')!r} at {i})")
        module = f.get("module") or ""
        line = f.get("line")
        if line is not None and (isinstance(line, bool) or not isinstance(line, int)):
            raise ParseError(f"report: frames[{i}].line must be an integer")
        has_source = f.get("has_source", not is_external_module(module))
        if not isinstance(has_source, bool) or not isinstance(module, str):
            raise ParseError(f"report: frames[{i}] has malformed module/has_source")
        file = f.get("file")
        if file is not None and not isinstance(file, str):
            raise ParseError(f"report: frames[{i}].file must be a string")
        frames.append(Frame(i, sys.intern(f["symbol"]), module, has_source, file, line))
    return CrashReport(kind, fault, size, tuple(frames))


def _report_from_asan(text: str) -> CrashReport:
    kind = CrashKind.SEGV_READ
    fault = 0
    size = 0
    frames: list[Frame] = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not header_seen:
            h = _ASAN_HEADER.search(line)
            if h:
                header_seen = True
                fault = int(h.group("addr"), 16)
                what = h.group("what").lower()
                write = False
                a = _ACCESS.search(line)
                if a:
                    write = a.group("rw") == "WRITE"
                kind = _asan_kind(what, write)
                continue
        if header_seen and not frames:
            a = _ACCESS.search(line)
            if a and ("size" in line or "access" in line):
                write = a.group("rw") == "WRITE"
                if a.group("size"):
                    size = int(a.group("size"))
                if kind in (CrashKind.SEGV_READ, CrashKind.SEGV_WRITE):
                    kind = CrashKind.SEGV_WRITE if write else CrashKind.SEGV_READ
                elif kind in (CrashKind.OVERFLOW_READ, CrashKind.OVERFLOW_WRITE):
                    kind = CrashKind.OVERFLOW_WRITE if write else CrashKind.OVERFLOW_READ
        if not line.startswith("#"):
            continue
        if frames and line.startswith("#0 "):
            break  # a second stack (allocation/free site) follows; keep the crash stack only
        m = _FRAME_LINE.fullmatch(line)
        if not m:
            raise ParseError(f"report: unparseable frame line {line[:80]!r}", lineno)
        index = int(m.group("index"))
        if index != len(frames):
            raise ParseError(f"report: frame #{index} out of sequence (expected #{len(frames)})", lineno)
        module = (m.group("module") or "").strip()
        frames.append(
            Frame(
                index,
                sys.intern(m.group("symbol")),
                module,
                not is_external_module(module),
                m.group("file"),
                int(m.group("line")) if m.group("line") else None,
            )
        )
    if not frames:
        raise ParseError("report: empty stack")
    return CrashReport(kind, fault, size, tuple(frames))


def _asan_kind(what: str, write: bool) -> CrashKind:
    if "overflow" in what or "out-of-bounds" in what:
        return CrashKind.OVERFLOW_WRITE if write else CrashKind.OVERFLOW_READ
    if what in ("abrt", "abort"):
        return CrashKind.ABORT
    return CrashKind.SEGV_WRITE if write else CrashKind.SEGV_READ


# ---------------------------------------------------------------------------
# Mutation logs

Value = Union[int, str]


@dataclass(frozen=True)
class MutationLog:
    entry_function: str
    mutated_path: str
    original_value: Value | None
    mutated_value: Value
    strategy: str
    seed: int | None = None
    index: int | None = None

    @property
    def replay_key(self) -> tuple[int | None, int | None]:
        return (self.seed, self.index)

    def to_line(self) -> str:
        parts = [
            f"entry={self.entry_function}",
            f"path={self.mutated_path}",
            f"old={format_value(self.original_value)}",
            f"new={format_value(self.mutated_value)}",
            f"strategy={self.strategy}",
        ]
        if self.seed is not None:
            parts.append(f"seed={self.seed}")
        if self.index is not None:
            parts.append(f"index={self.index}")
        return " ".join(parts)


def format_value(value: Value | None) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return shlex.quote("h:" + value)
    if value < 0:
        return str(value)
    return hex(value)


def _parse_value(token: str, key: str) -> Value | None:
    if token == "-":
        return None
    if token == "NULL":
        return 0
    if token.startswith("h:"):
        return token[2:]
    try:
        return int(token, 0)
    except ValueError:
        raise ParseError(f"mutation log: {key}= value {token!r} is neither an integer, NULL nor h:<handle>") from None


_LOG_KEYS = {"entry", "path", "old", "new", "strategy", "seed", "index"}


def parse_mutation_log(text: Union[str, bytes], spec: InterfaceSpec | None = None) -> MutationLog:
    """Parse a single mutation record; blank lines and ``#`` comments are ignored."""
    logs = parse_mutation_logs(text, spec)
    if len(logs) != 1:
        raise ParseError(f"mutation log: expected exactly one record, found {len(logs)}")
    return logs[0]


def parse_mutation_logs(text: Union[str, bytes], spec: InterfaceSpec | None = None) -> list[MutationLog]:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"mutation log: not UTF-8 text ({exc.reason})") from None
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        out.append(_parse_log_line(line, lineno, spec))
    return out


def _parse_log_line(line: str, lineno: int, spec: InterfaceSpec | None) -> MutationLog:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ParseError(f"mutation log: {exc}", lineno) from None
    fields: dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or key not in _LOG_KEYS:
            raise ParseError(f"mutation log: unexpected token {tok[:40]!r}", lineno)
        if key in fields:
            raise ParseError(f"mutation log: duplicate key {key!r}", lineno)
        fields[key] = value
    for key in ("entry", "path", "new", "strategy"):
        if not fields.get(key):
            raise ParseError(f"mutation log: missing {key}=", lineno)
    try:
        parse_path(fields["path"])
        old = _parse_value(fields.get("old", "-"), "old")
        new = _parse_value(fields["new"], "new")
        seed = int(fields["seed"]) if "seed" in fields else None
        index = int(fields["index"]) if "index" in fields else None
    except ParseError as exc:
        raise ParseError(exc.message, lineno) from None
    except ValueError:
        raise ParseError("mutation log: seed/index must be integers", lineno) from None
    if new is None:
        raise ParseError("mutation log: new= cannot be '-'", lineno)
    log = MutationLog(sys.intern(fields["entry"]), fields["path"], old, new, fields["strategy"], seed, index)
    if spec is not None:
        check_log_against(log, spec, lineno)
    return log


def check_log_against(log: MutationLog, spec: InterfaceSpec, lineno: int | None = None) -> ResolvedPath:
    try:
        resolved = spec.resolve(log.entry_function, log.mutated_path)
    except ParseError as exc:
        raise ParseError(exc.message, lineno) from None
    for value in (log.original_value, log.mutated_value):
        if value is not None and not value_fits(value, resolved.leaf):
            raise ParseError(
                f"mutation log: value {value!r} does not fit {resolved.leaf.kind} at {log.mutated_path}", lineno
            )
    return resolved


def value_fits(value: Any, t: IfaceType) -> bool:
    if isinstance(t, PointerType):
        return isinstance(value, int) and not isinstance(value, bool) and 0 <= value < 2**64
    if isinstance(t, ScalarType):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(t, HandleType):
        return isinstance(value, str)
    return False


# ---------------------------------------------------------------------------
# Source index

_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|0x[0-9a-fA-F]+|\d+|->|\S")


def tokenize(body: str) -> tuple[str, ...]:
    return tuple(_TOKEN.findall(body))


@dataclass(frozen=True)
class SourceEntry:
    symbol: str
    available: bool
    compartment: str
    body: str | None = None
    file: str | None = None
    line_start: int | None = None
    line_end: int | None = None
    default_attributed: bool = False

    @property
    def body_tokens(self) -> tuple[str, ...] | None:
        return None if self.body is None else tokenize(self.body)


@dataclass(frozen=True)
class SourceIndex:
    entries: Mapping[str, SourceEntry] = field(default_factory=dict)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.entries

    def get(self, symbol: str) -> SourceEntry | None:
        return self.entries.get(symbol)

    def has_source(self, symbol: str) -> bool:
        e = self.entries.get(symbol)
        return bool(e and e.available)

    def flagged(self) -> list[str]:
        return sorted(s for s, e in self.entries.items() if e.default_attributed)


def build_source_index(functions: Mapping[str, Mapping[str, Any]], policy: CompartmentPolicy) -> SourceIndex:
    """Attribute each function to a compartment through the policy globs."""
    entries = {}
    for symbol in sorted(functions):
        info = functions[symbol]
        compartment, flagged = policy.attribute(symbol)
        if flagged:
            logger.warning("symbol %s matches no code unit; attributed to %s", symbol, compartment)
        span = info.get("lines") or [None, None]
        body = info.get("body")
        entries[symbol] = SourceEntry(
            sys.intern(symbol),
            bool(info.get("available", body is not None)),
            compartment,
            body,
            info.get("file"),
            span[0],
            span[1],
            flagged,
        )
    return SourceIndex(entries)


def parse_source_index(text: Union[str, bytes, Mapping], policy: CompartmentPolicy) -> SourceIndex:
    tree = text if isinstance(text, Mapping) else load_json(text, "source index")
    if not isinstance(tree, Mapping) or not isinstance(tree.get("functions"), Mapping):
        raise ParseError("source index: expected an object with a 'functions' map")
    for name, info in tree["functions"].items():
        if not isinstance(info, Mapping):
            raise ParseError(f"source index: entry {name!r} must be an object")
    return build_source_index(tree["functions"], policy)


def check_report_against_index(report: CrashReport, index: SourceIndex, policy: CompartmentPolicy) -> list[str]:
    """Trusted frames that claim source but have none in the index."""
    missing = []
    for f in report.frames:
        if f.has_source and policy.is_trusted(f.symbol) and not index.has_source(f.symbol):
            missing.append(f.symbol)
    return missing
