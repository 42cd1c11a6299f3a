"""Independent oracles used by the test suite.

``op_scan_roles`` recomputes crash-stack roles by a static scan of each
frame's ops along the crash chain; it never looks at the executor trace.
``random_scenario`` generates seeded call-chain scenarios for property
tests of the stack analyzer.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from civrepair.ingest import CompartmentPolicy, parse_policy
from civrepair.scenario import Payload, Scenario, load_scenario

INTERPRETING = {"deref", "index", "read_cstr", "use", "guard", "resolve"}
FORWARDING = {"call", "pass"}


def _origin(env: dict[str, str | None], path: str) -> str | None:
    root, dot, rest = path.partition(".")
    base = env.get(root)
    if base is None:
        return None
    return f"{base}.{rest}" if dot else base


def _covers(origin: str | None, unit: str) -> bool:
    return origin is not None and (origin == unit or unit.startswith(origin + "."))


@dataclass
class FrameScan:
    symbol: str
    in_scope: bool
    interprets: bool
    forwards: bool


def op_scan(s: Scenario, stack: tuple[str, ...], fault_op: int, unit: str) -> list[FrameScan]:
    """Walk the chain outermost-first, tracking which local names carry which payload path."""
    scans: list[FrameScan] = []
    env: dict[str, str | None] = {p: (p if s.start == s.interface_entry else None) for p in s.functions[stack[-1]].params}
    for depth in range(len(stack) - 1, -1, -1):
        fn = s.functions[stack[depth]]
        if depth == 0:
            last = fault_op
        else:
            last = next(i for i, op in enumerate(fn.ops) if op.kind == "call" and op.callee == stack[depth - 1])
        interprets = forwards = False
        held = dict(env)
        child_env: dict[str, str | None] = {}
        for i, op in enumerate(fn.ops[: last + 1]):
            origins = [_origin(held, r) for r in op.refs()]
            if unit in origins:
                interprets |= op.kind in INTERPRETING
                forwards |= op.kind in FORWARDING
            if op.kind == "call" and op.callee == s.interface_entry:
                for arg, param in zip(op.args, s.functions[op.callee].params):
                    if "." not in arg:
                        held[arg] = param
                if op.ret:
                    held[op.ret] = "return"
            if depth > 0 and i == last:
                child = s.functions[op.callee]
                child_env = {p: o for p, o in zip(child.params, origins)}
        scans.append(FrameScan(fn.name, any(_covers(o, unit) for o in held.values()), interprets, forwards))
        env = child_env
    scans.reverse()  # crash site first
    return scans


def op_scan_roles(s: Scenario, policy: CompartmentPolicy, stack, fault_op: int, unit: str) -> dict[str, str]:
    """Expected role of every analysed frame, plus COMMIT for the entry."""
    scans = op_scan(s, tuple(stack), fault_op, unit)
    trusted = [policy.is_trusted(sc.symbol) for sc in scans]
    source = [s.functions[sc.symbol].has_source for sc in scans]
    cand = [trusted[i] and scans[i].in_scope and (i > 0 or source[i]) for i in range(len(scans))]
    members = [i for i in range(len(scans)) if cand[i] or (i == 0 and trusted[0] and scans[0].in_scope)]
    consume = None
    for i in members:
        if cand[i] and scans[i].interprets:
            consume = i  # keeps the outermost interpreter
    if consume is None and 0 in members and not cand[0] and scans[0].interprets:
        consume = 0
    roles = {}
    for i in members:
        sc = scans[i]
        if i == consume:
            roles[sc.symbol] = "CONSUME"
        elif i == 0:
            roles[sc.symbol] = "CRASH_SITE"
        elif sc.interprets or sc.forwards:
            roles[sc.symbol] = "FORWARD"
        else:
            roles[sc.symbol] = "PRESENCE"
    roles[s.interface_entry] = "COMMIT"
    return roles


# ---------------------------------------------------------------------------
# Random call-chain scenarios


GLOBAL_BASE = 0x10000
UNIT_BASE = 0x20000


def random_scenario(seed: int, max_frames: int = 8) -> tuple[Scenario, CompartmentPolicy, str, Payload]:
    """A seeded chain ``t{n-1} -> ... -> t0`` with one injection frame.

    Returns the scenario, its policy, the unit path and the mutated payload
    (unit set to NULL).
    """
    rng = random.Random(seed)
    n = rng.randint(2, max_frames)
    struct_mode = rng.random() < 0.5
    lib_site = rng.random() < 0.4
    k = rng.randint(1 if lib_site else 0, n - 1)  # injection frame
    names = [f"t{j}" for j in range(n)]
    untrusted_helpers = {j for j in range(1, k) if rng.random() < 0.2}
    for j in untrusted_helpers:
        names[j] = f"plugin_helper{j}"
    if lib_site:
        names[0] = "lib_sink"
    entry = "plugin_provide"
    unit = "r.f" if struct_mode else "return"

    functions: dict[str, dict] = {}
    # the variable holding the unit (or its container) in each frame at or below k
    holder: dict[int, str] = {}
    params: dict[int, list[str]] = {n - 1: ["g", "r"] if struct_mode else ["g"]}
    for j in range(n - 1, -1, -1):
        ops: list[str] = []
        mine = params[j]
        h = holder.get(j)
        if j == k:
            if struct_mode:
                ops.append(f"call {entry}(r)")
                h = "r"
            else:
                ops.append(f"u = call {entry}()")
                h = "u"
            holder[j] = h
        expr = None if h is None else (f"{h}.f" if h == "r" and struct_mode else h)
        if j == 0:
            ops += _noise(rng, expr, allow_crash=False, lib=lib_site)
            ops.append(f"deref({expr or 'g'}, 16)")
            ops.append("return")
            functions[names[j]] = _fn(names[j], mine, ops, lib=lib_site, untrusted=False)
            break
        ops += _noise(rng, expr, allow_crash=True, lib=False)
        args = ["g"]
        child = ["g"]
        if j > k:
            if struct_mode:
                args.append("r")
                child.append("r")
        elif expr is not None:
            mode = rng.choice(["forward", "forward", "container"] if h == "r" else ["forward"])
            if mode == "container":
                args.append("r")
                child.append("r")
                holder[j - 1] = "r"
            else:
                alias = rng.choice(["p", "q", "tbl", "ptr"])
                args.append(expr)
                child.append(alias)
                holder[j - 1] = alias
        params[j - 1] = child
        ops.append(f"call {names[j - 1]}({', '.join(args)})")
        ops.append("return")
        functions[names[j]] = _fn(names[j], mine, ops, lib=False, untrusted=j in untrusted_helpers)
    functions[entry] = {"compartment": "plugin", "module": "plugin.so", "has_source": True,
                        "params": ["r"] if struct_mode else [], "ops": ["return"]}

    template = {"r": {"f": hex(UNIT_BASE), "n": 3}} if struct_mode else {"return": hex(UNIT_BASE)}
    mutated = Payload({"r": {"f": 0, "n": 3}} if struct_mode else {"return": 0})
    globals_ = {"g": hex(GLOBAL_BASE)}
    if struct_mode:
        globals_["r"] = {"f": hex(UNIT_BASE), "n": 3}
    tree = {
        "name": f"random-{seed}",
        "start": names[n - 1],
        "interface_entry": entry,
        "memory": {"g": {"base": hex(GLOBAL_BASE), "size": 64}, "unit": {"base": hex(UNIT_BASE), "size": 64}},
        "globals": globals_,
        "payload": template,
        "functions": functions,
    }
    ptr = {"kind": "pointer", "target": "T", "size": 16}
    if struct_mode:
        iface = {"name": entry, "owner_compartment": "plugin", "returns": None, "params": [
            {"name": "r", "type": {"kind": "structured", "name": "S",
                                   "fields": {"f": ptr, "n": {"kind": "scalar", "range": [0, 10]}}}}]}
    else:
        iface = {"name": entry, "owner_compartment": "plugin", "params": [], "returns": ptr}
    policy = {
        "compartments": [
            {"name": "app", "trust": "trusted", "code_units": ["t*", "lib_*"]},
            {"name": "plugin", "trust": "untrusted", "code_units": ["plugin_*"]},
        ],
        "trust_model": "sandbox",
        "security_goals": ["integrity", "availability"],
        "interface": {"functions": [iface]},
    }
    return load_scenario(json.dumps(tree)), parse_policy(json.dumps(policy)), unit, mutated


def _noise(rng: random.Random, expr: str | None, allow_crash: bool, lib: bool) -> list[str]:
    out = []
    for _ in range(rng.randint(0, 3)):
        choices = ["use(g)", "deref(g, 8)", "pass(g)"]
        if expr is not None:
            choices += [f"pass({expr})", f"commit({expr})"]
            if allow_crash or lib:
                choices += [f"use({expr})"]
        out.append(rng.choice(choices))
    return out


def _fn(name: str, params: list[str], ops: list[str], *, lib: bool, untrusted: bool) -> dict:
    body = {"compartment": "plugin" if untrusted else "app", "params": params, "ops": ops}
    if lib:
        body.update(module="/usr/lib/libsink.so.1", has_source=False)
    return body
