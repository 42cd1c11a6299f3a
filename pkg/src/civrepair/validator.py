"""Patch validation, the repair feedback loop and human-guidance reports.

A candidate is rejected before execution if it lands in the untrusted
compartment. Otherwise it is applied to a copy of the scenario, the
recorded payload is replayed, and a fixed family of probes for the CIV's
class is run on the same unit. A patch that stops the recorded payload but
not every probe is *partial*; the loop feeds the counterexample back into
the next prompt.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .classifier import Category, CivClass
from .errors import BackendError, ExecutionError, PatchError
from .fuzzer import (
    INT32_MAX,
    INT32_MIN,
    CivFinding,
    fresh_unmapped,
    mutated_value,
    strategies_for,
    strategy,
)
from .ingest import (
    CompartmentPolicy,
    HandleType,
    IfaceType,
    InterfaceSpec,
    PointerType,
    ScalarType,
    format_value,
)
from .patch_gen import (
    Backend,
    CandidatePatch,
    Feedback,
    RepairContext,
    apply_candidate,
    build_prompt,
    generate_patch,
)
from .scenario import Payload, Scenario, execute
from .stack_analyzer import PatchSite

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 5
DEFAULT_PROBE_BUDGET = 32

EXIT_FIXED = 0
EXIT_NOT_FIXED = 2
EXIT_REJECTED = 3
EXIT_INPUT = 4

FIXED = "fixed"
PARTIAL = "partial"
NOT_FIXED = "not_fixed"
REJECTED = "rejected-placement"
GENERATION_FAILED = "generation-failed"

MAPPED_BUT_CORRUPTED_NOTE = (
    "Guards only establish that the unit is mapped, in domain or well formed. "
    "A unit that points to mapped memory whose contents the untrusted compartment "
    "corrupted (mapped-but-corrupted structured state) passes every such guard; "
    "review how the trusted side interprets the pointed-to fields."
)


# ---------------------------------------------------------------------------
# Placement


@dataclass(frozen=True)
class PlacementVerdict:
    target: str
    placement_ok: bool
    trust_broken: bool

    def to_dict(self) -> dict:
        return {"target": self.target, "placement_ok": self.placement_ok, "trust_broken": self.trust_broken}


def check_placement(
    patch: CandidatePatch,
    site: PatchSite | None,
    policy: CompartmentPolicy,
    known_symbols: Any = None,
) -> PlacementVerdict:
    """Compare the patch target with the preferred site and the trust policy."""
    target = patch.target_function
    if known_symbols is not None and target not in known_symbols:
        raise PatchError(f"patch targets unknown symbol {target!r}")
    ok = site is not None and target == site.function
    return PlacementVerdict(target, ok, not policy.is_trusted(target))


# ---------------------------------------------------------------------------
# Probes


@dataclass(frozen=True)
class Probe:
    family: str
    path: str
    value: Any

    def describe(self) -> str:
        return f"{self.family}: {self.path}={format_value(self.value)}"


PROBE_FAMILIES = {
    "pointer": ("null", "unmapped-nonnull", "misaligned", "truncated-region"),
    "scalar": ("negative", "below-lower-bound", "above-upper-bound", "extreme-max", "extreme-min"),
    "handle": ("format-corrupt", "stale", "wrong-kind"),
}


def probe_kind(f: CivFinding, spec: InterfaceSpec | None) -> IfaceType:
    """The leaf type under test; the strategy names its kind when no spec is given."""
    if spec is not None:
        return spec.resolve(f.mutation.entry_function, f.mutation.mutated_path).leaf
    kind = strategy(f.mutation.strategy).applicable_type
    if kind == "pointer":
        return PointerType("?", max(1, f.report.access_size))
    if kind == "handle":
        value = f.mutation.new_value if isinstance(f.mutation.new_value, str) else "handle:0"
        return HandleType(value.split(":")[0].split("#")[0])
    return ScalarType()


def class_probes(s: Scenario, f: CivFinding, leaf: IfaceType) -> list[Probe]:
    """The fixed probe family for the finding's unit, in family order, deduplicated."""
    path = f.mutation.mutated_path
    original = s.payload_template.get(path)
    rng = random.Random(f"probe:{path}")
    out: list[Probe] = []
    if leaf.kind == "pointer":
        vals = [
            ("null", 0),
            ("unmapped-nonnull", fresh_unmapped(rng, s)),
            ("misaligned", mutated_value(strategy("ptr-misaligned"), original, leaf, rng, s)),
            ("truncated-region", mutated_value(strategy("ptr-truncated"), original, leaf, rng, s)),
        ]
    elif leaf.kind == "scalar":
        if leaf.values is not None:
            lo, hi = min(leaf.values), max(leaf.values) + 1
        else:
            lo, hi = leaf.lo, leaf.hi
        vals = [("negative", -1)]
        if lo is not None:
            vals.append(("below-lower-bound", lo - 1))
        if hi is not None:
            vals.append(("above-upper-bound", hi))
        vals += [("extreme-max", INT32_MAX), ("extreme-min", INT32_MIN)]
    else:
        vals = [
            (fam, mutated_value(strategy(sid), original, leaf, rng, s))
            for fam, sid in zip(PROBE_FAMILIES["handle"], ("handle-format-corrupt", "handle-stale-id", "handle-wrong-kind"))
        ]
    seen = set()
    for fam, v in vals:
        if v not in seen:
            seen.add(v)
            out.append(Probe(fam, path, v))
    return out


def extra_probes(s: Scenario, f: CivFinding, leaf: IfaceType, n: int, seed: int = 0) -> list[Probe]:
    """Seeded random supplement drawn from the fuzzer strategies for the same unit."""
    path = f.mutation.mutated_path
    strats = strategies_for(leaf.kind)
    original = s.payload_template.get(path)
    out = []
    for i in range(n):
        rng = random.Random(f"extra:{seed}:{i}")
        st = strats[rng.randrange(len(strats))]
        out.append(Probe(f"random:{st.id}", path, mutated_value(st, original, leaf, rng, s)))
    return out


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Counterexample:
    probe: str  # probe family, or "original" for the recorded payload
    payload: Payload
    crash_site: str
    description: str

    def to_dict(self) -> dict:
        return {
            "probe": self.probe,
            "crash_site": self.crash_site,
            "description": self.description,
            "payload": self.payload.to_dict(),
        }


@dataclass(frozen=True)
class ValidationVerdict:
    status: str
    counterexamples: tuple[Counterexample, ...] = ()
    probes_run: int = 0
    diagnostic: str | None = None
    unguarded_families: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "counterexamples": [c.to_dict() for c in self.counterexamples],
            "probes_run": self.probes_run,
            "diagnostic": self.diagnostic,
            "unguarded_families": list(self.unguarded_families),
        }


def validate(
    s: Scenario,
    patch: CandidatePatch,
    f: CivFinding,
    cls: CivClass,
    probe_budget: int = DEFAULT_PROBE_BUDGET,
    *,
    spec: InterfaceSpec | None = None,
    extra: int = 0,
    seed: int = 0,
) -> ValidationVerdict:
    """Apply ``patch``, replay the finding, then run the class probe family."""
    if probe_budget < 0:
        raise ValueError("probe_budget must be >= 0")
    try:
        patched = apply_candidate(s, patch)
    except PatchError as exc:
        return ValidationVerdict(NOT_FIXED, diagnostic=f"patch does not apply: {exc}")

    try:
        replay = execute(patched, f.payload)
    except ExecutionError as exc:
        return ValidationVerdict(NOT_FIXED, diagnostic=f"replay failed: {exc}")
    if replay.crashed:
        cx = Counterexample("original", f.payload, replay.crash.stack[0], "recorded payload still crashes")
        return ValidationVerdict(NOT_FIXED, (cx,), 0, "the recorded payload still crashes", (f.mutation.strategy,))

    leaf = probe_kind(f, spec)
    if cls.category is not Category.STRUCTURED_PAYLOAD and leaf.kind != _CATEGORY_KIND[cls.category]:
        logger.warning("class %s does not match a %s unit", cls.category.value, leaf.kind)
    probes = class_probes(s, f, leaf) + extra_probes(s, f, leaf, extra, seed)
    probes = probes[:probe_budget]
    cxs = []
    for pr in probes:
        payload = f.payload.with_value(pr.path, pr.value)
        out = execute(patched, payload)
        if out.crashed:
            cxs.append(Counterexample(pr.family, payload, out.crash.stack[0],
                                      f"{pr.describe()} crashes at {out.crash.stack[0]}"))
    if cxs:
        fams = tuple(dict.fromkeys(c.probe for c in cxs))
        return ValidationVerdict(PARTIAL, tuple(cxs), len(probes),
                                 "recorded payload blocked, but probes on the same unit still crash", fams)
    return ValidationVerdict(FIXED, (), len(probes))


_CATEGORY_KIND = {Category.POINTER: "pointer", Category.SCALAR: "scalar", Category.OPAQUE_HANDLE: "handle"}


# ---------------------------------------------------------------------------
# Repair loop


@dataclass(frozen=True)
class Attempt:
    iteration: int
    patch: CandidatePatch | None
    placement: PlacementVerdict | None
    verdict: ValidationVerdict | None
    error: str | None = None

    @property
    def status(self) -> str:
        if self.patch is None:
            return GENERATION_FAILED
        if self.placement is not None and self.placement.trust_broken:
            return REJECTED
        return self.verdict.status

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "status": self.status,
            "patch": self.patch.to_dict() if self.patch else None,
            "placement": self.placement.to_dict() if self.placement else None,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "error": self.error,
        }


@dataclass(frozen=True)
class RepairOutcome:
    status: str
    accepted: CandidatePatch | None
    attempts: tuple[Attempt, ...]
    context: RepairContext
    max_iter: int
    report: str | None = None

    @property
    def exit_code(self) -> int:
        return exit_code(self.status)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "exit_code": self.exit_code,
            "accepted": self.accepted.to_dict() if self.accepted else None,
            "attempts": [a.to_dict() for a in self.attempts],
            "max_iter": self.max_iter,
            "site": self.context.site.to_dict() if self.context.site else None,
            "report": self.report,
        }


def exit_code(status: str) -> int:
    if status == FIXED:
        return EXIT_FIXED
    if status == REJECTED:
        return EXIT_REJECTED
    return EXIT_NOT_FIXED


def _feedback(attempt: Attempt) -> Feedback:
    v = attempt.verdict
    cx = v.counterexamples[0].description if v and v.counterexamples else None
    note = attempt.error or (v.diagnostic if v and v.status != PARTIAL else "") or ""
    if attempt.status == REJECTED:
        note = f"{attempt.patch.target_function} belongs to the untrusted compartment"
    return Feedback(attempt.patch, attempt.status, cx, note)


def repair_loop(
    ctx: RepairContext,
    scenario: Scenario,
    backend: Backend,
    max_iter: int = DEFAULT_MAX_ITER,
    probe_budget: int = DEFAULT_PROBE_BUDGET,
    *,
    extra: int = 0,
    seed: int = 0,
) -> RepairOutcome:
    """Generate, place-check and validate until fixed or ``max_iter`` attempts."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    attempts: list[Attempt] = []
    if ctx.site is None:
        outcome = RepairOutcome(NOT_FIXED, None, (), ctx, max_iter)
        return _with_report(outcome)

    for it in range(1, max_iter + 1):
        prompt = build_prompt(ctx)
        try:
            patch = generate_patch(backend, prompt, it)
        except BackendError as exc:
            attempt = Attempt(it, None, None, None, f"generation failed: {exc}")
        else:
            try:
                placement = check_placement(patch, ctx.site, ctx.policy, scenario.functions)
            except PatchError as exc:
                attempt = Attempt(it, patch, None, ValidationVerdict(NOT_FIXED, diagnostic=str(exc)), str(exc))
            else:
                if placement.trust_broken:
                    attempt = Attempt(it, patch, placement, ValidationVerdict(REJECTED, diagnostic="patch inside the untrusted compartment"))
                else:
                    verdict = validate(scenario, patch, ctx.finding, ctx.civ, probe_budget,
                                       spec=ctx.spec, extra=extra, seed=seed)
                    attempt = Attempt(it, patch, placement, verdict)
        attempts.append(attempt)
        logger.info("iteration %d: %s", it, attempt.status)
        if attempt.status == FIXED:
            return RepairOutcome(FIXED, attempt.patch, tuple(attempts), ctx, max_iter)
        ctx = ctx.with_feedback(_feedback(attempt))

    last = attempts[-1].status
    status = last if last in (PARTIAL, REJECTED) else NOT_FIXED
    return _with_report(RepairOutcome(status, None, tuple(attempts), ctx, max_iter))


def _with_report(outcome: RepairOutcome) -> RepairOutcome:
    return RepairOutcome(outcome.status, outcome.accepted, outcome.attempts, outcome.context,
                         outcome.max_iter, emit_human_report(outcome))


def emit_human_report(outcome: RepairOutcome) -> str:
    """Plain-text guidance for a developer when automatic repair did not succeed."""
    if outcome.status == FIXED:
        raise ValueError("no human report for a fixed outcome")
    ctx = outcome.context
    f = ctx.finding
    unit = ctx.roles.crash_var.unit_label if ctx.roles else "unknown unit"
    lines = [
        f"CIV repair report: {f.scenario_name}",
        f"Status: {outcome.status} after {len(outcome.attempts)} of {outcome.max_iter} iterations",
        "",
        "== CIV ==",
        f"Class: {ctx.civ.category.value} (boundary focus {ctx.civ.boundary_focus}, impact {ctx.civ.impact})",
        f"Patching unit: {ctx.civ.patching_unit}: {unit} via {f.mutation.entry_function} {f.mutation.mutated_path}",
        f"Mutation: {f.mutation.to_line()}",
        f"Crash: {f.report.kind.value} at {f.report.crash_site.symbol}",
        f"Oracle guard: {ctx.oracle.name}",
        "",
        "== Roles ==",
    ]
    if ctx.roles is None:
        lines.append("no trusted-side patch site: no trusted frame holds the crash variable")
    else:
        for e in ctx.roles.entries:
            where = "untrusted" if e.index is None else f"#{e.index}"
            lines.append(f"  {where:<10} {e.symbol:<28} {e.role.value:<10} {'source' if e.has_source else 'no source'}")
        if ctx.site is None:
            lines.append(f"no automatic patch site: {ctx.analysis_error}")
        else:
            lines.append(f"Preferred site: {ctx.site.function} ({ctx.site.justification})")
    if ctx.site is None and ctx.roles is None:
        lines[-1] = "no trusted-side patch site: " + (ctx.analysis_error or "no boundary candidate")

    lines += ["", "== Attempts =="]
    if not outcome.attempts:
        lines.append("no patch generated")
    for a in outcome.attempts:
        target = a.patch.target_function if a.patch else "-"
        lines.append(f"  {a.iteration}. {target}: {a.status}")
        if a.patch is not None:
            for g in _added_guards(a.patch):
                lines.append(f"     + {g}")
        if a.error:
            lines.append(f"     {a.error}")
        if a.verdict is not None:
            if a.verdict.diagnostic and a.status != PARTIAL:
                lines.append(f"     {a.verdict.diagnostic}")
            for cx in a.verdict.counterexamples:
                lines.append(f"     counterexample: {cx.description}")

    last = next((a.verdict for a in reversed(outcome.attempts) if a.verdict and a.verdict.status in (PARTIAL, NOT_FIXED)), None)
    kind = _leaf_kind(ctx)
    remaining = last.unguarded_families if last and last.unguarded_families else PROBE_FAMILIES.get(kind, ())
    lines += ["", "== Unguarded probe families =="]
    lines += [f"  {fam}" for fam in remaining] or ["  none recorded"]
    lines += ["", "== Open hardening gap ==", MAPPED_BUT_CORRUPTED_NOTE]
    if ctx.site is not None and ctx.site.unit_expr:
        lines += [
            "",
            "== Suggested action ==",
            f"Insert 'guard {ctx.oracle.predicate(ctx.site.unit_expr).render()} on_fail return' in "
            f"{ctx.site.function} before op {ctx.site.insert_before}, and decide how the caller handles the failure.",
        ]
    return "\n".join(lines) + "\n"


def _leaf_kind(ctx: RepairContext) -> str:
    return ctx.spec.resolve(ctx.finding.mutation.entry_function, ctx.finding.mutation.mutated_path).leaf.kind


def _added_guards(patch: CandidatePatch) -> list[str]:
    if patch.form == "guard-insertion":
        return [g.describe() for g in patch.guards]
    return [l[1:].strip() for l in patch.body.splitlines() if l.startswith("+") and not l.startswith("+++")]


# ---------------------------------------------------------------------------
# Placement benchmark


@dataclass(frozen=True)
class BenchRow:
    backend: str
    iterations: int
    placement_ok: int
    trust_broken: int
    generation_failed: int = 0

    @property
    def placement_ok_pct(self) -> float:
        return 100.0 * self.placement_ok / self.iterations

    @property
    def trust_broken_pct(self) -> float:
        return 100.0 * self.trust_broken / self.iterations

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "iterations": self.iterations,
            "placement_ok": self.placement_ok,
            "trust_broken": self.trust_broken,
            "generation_failed": self.generation_failed,
            "placement_ok_pct": self.placement_ok_pct,
            "trust_broken_pct": self.trust_broken_pct,
        }


def bench_placement(
    ctx: RepairContext,
    scenario: Scenario,
    backend: Backend,
    iterations: int = 10,
    probe_budget: int = DEFAULT_PROBE_BUDGET,
) -> BenchRow:
    """Run the pipeline ``iterations`` times and score where the first patch lands."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ok = broken = failed = 0
    for _ in range(iterations):
        out = repair_loop(ctx, scenario, backend, max_iter=1, probe_budget=probe_budget)
        if not out.attempts:
            failed += 1
            continue
        a = out.attempts[0]
        if a.placement is None:
            failed += 1
            continue
        ok += a.placement.placement_ok
        broken += a.placement.trust_broken
    return BenchRow(backend.id, iterations, ok, broken, failed)


def format_bench_table(rows: list[BenchRow]) -> str:
    head = f"{'backend':<16} {'iterations':>10} {'placement-ok':>13} {'trust-broken':>13}"
    body = [
        f"{r.backend:<16} {r.iterations:>10} {r.placement_ok_pct:>12.0f}% {r.trust_broken_pct:>12.0f}%" for r in rows
    ]
    return "\n".join([head, *body]) + "\n"
