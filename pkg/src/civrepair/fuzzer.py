"""Interface fuzzer: one mutation per injected payload, replayable findings."""

from __future__ import annotations

import json
import logging
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ExecutionError, ParseError
from .ingest import (
    CrashReport,
    HandleType,
    IfaceType,
    InterfaceFunction,
    InterfaceSpec,
    MutationLog,
    PointerType,
    ScalarType,
    StructType,
    format_path,
    parse_mutation_log,
    parse_sanitizer_report,
)
from .scenario import ExecutionOutcome, Payload, Scenario, execute, same_shape

logger = logging.getLogger(__name__)

UNMAPPED_BASE = 0x414141410000
INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)


@dataclass(frozen=True)
class MutationStrategy:
    id: str
    applicable_type: str
    description: str


STRATEGIES: tuple[MutationStrategy, ...] = (
    MutationStrategy("ptr-null", "pointer", "replace the pointer with NULL"),
    MutationStrategy("ptr-unmapped", "pointer", "replace the pointer with a non-NULL address outside every region"),
    MutationStrategy("ptr-misaligned", "pointer", "shift the pointer by one byte"),
    MutationStrategy("ptr-truncated", "pointer", "point into the tail of a region, too short for the target"),
    MutationStrategy("scalar-negative", "scalar", "force -1"),
    MutationStrategy("scalar-zero", "scalar", "force 0"),
    MutationStrategy("scalar-max", "scalar", "force INT32_MAX"),
    MutationStrategy("scalar-out-of-domain", "scalar", "first value past the declared domain"),
    MutationStrategy("handle-format-corrupt", "handle", "replace the handle with a malformed token"),
    MutationStrategy("handle-stale-id", "handle", "well-formed handle of the same kind that is not live"),
    MutationStrategy("handle-wrong-kind", "handle", "well-formed live-looking handle of another kind"),
)
_BY_ID = {s.id: s for s in STRATEGIES}


def strategy(strategy_id: str) -> MutationStrategy:
    try:
        return _BY_ID[strategy_id]
    except KeyError:
        raise ParseError(f"unknown mutation strategy {strategy_id!r}") from None


def strategies_for(kind: str) -> tuple[MutationStrategy, ...]:
    return tuple(s for s in STRATEGIES if s.applicable_type == kind)


def leaf_paths(fn: InterfaceFunction) -> list[tuple[str, IfaceType]]:
    """Every mutable leaf of the entry's parameters and return value, in declaration order."""
    out: list[tuple[str, IfaceType]] = []

    def walk(prefix: tuple, t: IfaceType) -> None:
        if isinstance(t, StructType):
            for name, ft in t.fields:
                walk(prefix + (name,), ft)
        else:
            out.append((format_path(prefix), t))

    for name, t in fn.slots():
        walk((name,), t)
    return out


# ---------------------------------------------------------------------------
# Mutation


def fresh_unmapped(rng: random.Random, scenario: Scenario | None) -> int:
    while True:
        addr = UNMAPPED_BASE + rng.randrange(0, 1 << 16) * 0x1000
        if scenario is None or scenario.region_at(addr) is None:
            return addr


def mutated_value(
    strat: MutationStrategy,
    original: Any,
    leaf: IfaceType,
    rng: random.Random,
    scenario: Scenario | None = None,
) -> Any:
    """The replacement value ``strat`` produces for ``original``."""
    sid = strat.id
    if sid == "ptr-null":
        return 0
    if sid == "ptr-unmapped":
        return fresh_unmapped(rng, scenario)
    if sid == "ptr-misaligned":
        return (original or 0) + 1
    if sid == "ptr-truncated":
        size = leaf.size if isinstance(leaf, PointerType) else 1
        region = scenario.region_at(original) if scenario is not None and original else None
        if region is None and scenario is not None:
            mapped = sorted((r for r in scenario.memory if r.mapped), key=lambda r: r.base)
            region = mapped[-1] if mapped else None
        if region is None:
            return 1
        return region.base + region.size - max(1, size // 2)
    if sid == "scalar-negative":
        return -1
    if sid == "scalar-zero":
        return 0
    if sid == "scalar-max":
        return INT32_MAX
    if sid == "scalar-out-of-domain":
        assert isinstance(leaf, ScalarType)
        if leaf.values is not None:
            return max(leaf.values) + 1
        if leaf.hi is not None:
            return leaf.hi
        if leaf.lo is not None:
            return leaf.lo - 1
        return INT32_MIN
    kind = leaf.handle_kind if isinstance(leaf, HandleType) else "handle"
    live = sorted(scenario.handles) if scenario is not None else []
    if sid == "handle-format-corrupt":
        return f"{kind}#corrupt"
    if sid == "handle-stale-id":
        ids = [int(h.split(":")[1]) for h in live if h.startswith(kind + ":") and h.split(":")[1].isdigit()]
        return f"{kind}:{max(ids, default=0) + 1}"
    if sid == "handle-wrong-kind":
        ident = str(original).split(":")[-1] if original else "0"
        others = [h.split(":")[0] for h in live if not h.startswith(kind + ":")]
        return f"{others[0] if others else 'x' + kind}:{ident}"
    raise ParseError(f"unknown mutation strategy {sid!r}")


def mutate(
    p: Payload,
    strat: MutationStrategy,
    path: str,
    rng: random.Random,
    *,
    leaf: IfaceType,
    scenario: Scenario | None = None,
    provenance: tuple[int, int] | None = None,
) -> Payload:
    """Return a copy of ``p`` that differs only at ``path``."""
    if leaf.kind != strat.applicable_type:
        raise ParseError(f"strategy {strat.id} does not apply to a {leaf.kind} at {path}")
    original = p.get(path)
    return p.with_value(path, mutated_value(strat, original, leaf, rng, scenario), provenance)


# ---------------------------------------------------------------------------
# Findings


@dataclass(frozen=True)
class CivFinding:
    report: CrashReport
    mutation: MutationLog
    payload: Payload
    scenario_name: str
    seed: int
    index: int

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.report.crash_site.symbol, self.mutation.mutated_path, self.mutation.strategy)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_name,
            "seed": self.seed,
            "index": self.index,
            "mutation": self.mutation.to_line(),
            "report": self.report.to_dict(),
            "payload": self.payload.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_finding(text: str | bytes, spec: InterfaceSpec | None = None) -> CivFinding:
    from .ingest import load_json

    tree = load_json(text, "finding")
    try:
        return CivFinding(
            parse_sanitizer_report(json.dumps(tree["report"])),
            parse_mutation_log(tree["mutation"], spec),
            Payload.from_dict(tree["payload"]),
            tree["scenario"],
            int(tree["seed"]),
            int(tree["index"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"finding: malformed document ({exc})") from None


def load_finding_file(path: str | os.PathLike, spec: InterfaceSpec | None = None) -> CivFinding:
    return load_finding(Path(path).read_bytes(), spec)


def write_findings(findings: Iterable[CivFinding], directory: str | os.PathLike) -> list[Path]:
    """Write ``finding-NNN.json`` files with exclusive creation.

    An existing file with identical content is accepted so that reruns with
    the same seed are idempotent; any other collision raises FileExistsError.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(findings):
        path = out / f"finding-{i:03d}.json"
        data = f.to_json().encode()
        try:
            with open(path, "xb") as fh:
                fh.write(data)
        except FileExistsError:
            if path.read_bytes() != data:
                raise
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Campaigns


def _index_rng(seed: int, index: int) -> random.Random:
    return random.Random(f"{seed}:{index}")


def fuzz_interface(
    s: Scenario,
    spec: InterfaceSpec,
    budget: int,
    seed: int,
    *,
    workers: int = 1,
) -> list[CivFinding]:
    """Inject ``budget`` single-mutation payloads and collect distinct CIVs.

    The first ``|paths| x |strategies|`` injections cover every (path,
    strategy) pair once in a seeded order; the remainder redraw pairs at
    random. Findings are deduplicated on (crash site, path, strategy) and
    returned in order of first discovery.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    fn = spec.function(s.interface_entry)
    pairs = [(path, leaf, st) for path, leaf in leaf_paths(fn) for st in strategies_for(leaf.kind)]
    if not pairs:
        return []
    rng = random.Random(seed)
    order = list(pairs)
    rng.shuffle(order)
    plan = [order[i] if i < len(order) else rng.choice(pairs) for i in range(budget)]

    def attempt(i: int) -> tuple[int, Payload, ExecutionOutcome]:
        path, leaf, st = plan[i]
        payload = mutate(
            s.payload_template, st, path, _index_rng(seed, i), leaf=leaf, scenario=s, provenance=(seed, i)
        )
        return i, payload, execute(s, payload)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attempt, range(budget)))
    else:
        results = [attempt(i) for i in range(budget)]

    findings: list[CivFinding] = []
    seen: set[tuple[str, str, str]] = set()
    for i, payload, outcome in results:
        if not outcome.crashed:
            continue
        path, leaf, st = plan[i]
        key = (outcome.crash.stack[0], path, st.id)
        if key in seen:
            continue
        replay = execute(s, payload)
        if not replay.crashed or replay.crash.stack != outcome.crash.stack:
            logger.warning("finding %d did not replay identically; dropped", i)
            continue
        seen.add(key)
        log = MutationLog(s.interface_entry, path, s.payload_template.get(path), payload.get(path), st.id, seed, i)
        findings.append(CivFinding(outcome.to_report(s), log, payload, s.name, seed, i))
    logger.info("%s: %d injections, %d distinct findings", s.name, budget, len(findings))
    return findings


def reproduce(s: Scenario, f: CivFinding) -> ExecutionOutcome:
    """Replay a recorded payload on a (possibly patched) scenario."""
    if f.scenario_name != s.name:
        raise ExecutionError(f"finding recorded on {f.scenario_name!r}, not {s.name!r}")
    if not same_shape(s.payload_template.values, f.payload.values):
        raise ExecutionError("recorded payload no longer matches the scenario's interface shape")
    return execute(s, f.payload)
