"""Repair prompts and candidate patch backends.

Backends return free text; :func:`generate_patch` pulls the unified diff out
from between the sentinel lines. For scenarios, a diff may only add guard
lines (``guard <predicate> on_fail return|skip``), which
:func:`diff_to_guards` turns into :class:`~civrepair.scenario.GuardPatch`
objects, so every backend goes through the same validation path.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, Sequence

import httpx
from unidiff import PatchSet
from unidiff.errors import UnidiffParseError

from .classifier import CivClass, OracleGuard, classify, impact_summary, mutated_leaf, oracle_for
from .errors import AnalysisError, BackendError, PatchError, ScenarioError
from .fuzzer import CivFinding, reproduce
from .ingest import CompartmentPolicy, InterfaceSpec, SourceIndex
from .scenario import GuardPatch, Predicate, Scenario, apply_guard_patch, parse_op, source_index
from .stack_analyzer import (
    PatchSite,
    RoleAssignment,
    analyze,
    crash_variable,
    evidence_from_trace,
)

logger = logging.getLogger(__name__)

PATCH_BEGIN = "===PATCH-BEGIN==="
PATCH_END = "===PATCH-END==="
API_KEY_ENV = "CIVREPAIR_API_KEY"
API_URL_ENV = "CIVREPAIR_API_URL"

# ---------------------------------------------------------------------------
# Candidate patches


@dataclass(frozen=True)
class CandidatePatch:
    form: str  # "unified-diff" | "guard-insertion"
    target_function: str
    body: str
    backend: str
    attempt: int
    guards: tuple[GuardPatch, ...] = ()

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "target_function": self.target_function,
            "body": self.body,
            "backend": self.backend,
            "attempt": self.attempt,
        }


def guard_patch(g: GuardPatch, backend: str = "manual", attempt: int = 1) -> CandidatePatch:
    return CandidatePatch("guard-insertion", g.target_function, g.describe(), backend, attempt, (g,))


def make_guard_diff(symbol: str, source: str, insert_before: int, guard_line: str) -> str:
    """Unified diff adding one guard before op ``insert_before`` of a rendered body."""
    old = source.splitlines()
    new = list(old)
    new.insert(insert_before + 1, f"    {guard_line}")
    lines = difflib.unified_diff(old, new, fromfile=f"a/{symbol}", tofile=f"b/{symbol}", lineterm="")
    return "\n".join(lines) + "\n"


def diff_target(diff: str) -> str:
    for line in diff.splitlines():
        if line.startswith("+++ "):
            name = line[4:].split("\t")[0].strip()
            return name[2:] if name.startswith("b/") else name
    raise PatchError("diff has no +++ header")


def diff_to_guards(diff: str, scenario: Scenario) -> list[GuardPatch]:
    """Translate a guard-only diff against rendered bodies into guard patches.

    Indices in the result refer to the unpatched bodies.
    """
    try:
        patchset = PatchSet(diff)
    except UnidiffParseError as exc:
        raise PatchError(f"malformed diff: {exc}") from None
    if not len(patchset):
        raise PatchError("diff contains no file sections")
    guards: list[GuardPatch] = []
    for pf in patchset:
        name = pf.target_file[2:] if pf.target_file.startswith("b/") else pf.target_file
        fn = scenario.functions.get(name)
        if fn is None:
            raise PatchError(f"diff targets unknown function {name!r}")
        lines = fn.render()
        for hunk in pf:
            next_src = hunk.source_start
            for line in hunk:
                text = line.value.rstrip("\n")
                if line.is_context or line.is_removed:
                    no = line.source_line_no
                    if no is None or no > len(lines) or lines[no - 1] != text:
                        raise PatchError(f"{name}: diff context does not match line {no}")
                    if line.is_removed:
                        raise PatchError(f"{name}: only guard insertions are supported, not removals")
                    next_src = no + 1
                    continue
                try:
                    op = parse_op(text)
                except ScenarioError as exc:
                    raise PatchError(f"{name}: added line is not an op: {exc}") from None
                if op.kind != "guard":
                    raise PatchError(f"{name}: only guard lines may be added, got {op.kind}")
                guards.append(GuardPatch(name, next_src - 2, op.predicate, op.on_fail))
    return guards


def patch_guards(patch: CandidatePatch, scenario: Scenario) -> list[GuardPatch]:
    if patch.form == "guard-insertion":
        return list(patch.guards)
    return diff_to_guards(patch.body, scenario)


def apply_candidate(scenario: Scenario, patch: CandidatePatch) -> Scenario:
    """Apply every guard of ``patch``; later guards shift by earlier insertions."""
    guards = patch_guards(patch, scenario)
    if not guards:
        raise PatchError("patch adds no guard")
    shifted: dict[str, list[int]] = {}
    out = scenario
    for g in guards:
        before = sum(1 for i in shifted.get(g.target_function, []) if i <= g.insert_before_op_index)
        out = apply_guard_patch(out, replace(g, insert_before_op_index=g.insert_before_op_index + before))
        shifted.setdefault(g.target_function, []).append(g.insert_before_op_index)
    return out


# ---------------------------------------------------------------------------
# Repair context and prompt


@dataclass(frozen=True)
class Feedback:
    patch: CandidatePatch | None
    status: str
    counterexample: str | None
    note: str = ""


@dataclass(frozen=True)
class RepairContext:
    policy: CompartmentPolicy
    spec: InterfaceSpec
    finding: CivFinding
    civ: CivClass
    oracle: OracleGuard
    roles: RoleAssignment | None
    site: PatchSite | None
    sources: Mapping[str, str]
    history: tuple[Feedback, ...] = ()
    analysis_error: str | None = None

    def with_feedback(self, fb: Feedback) -> "RepairContext":
        return replace(self, history=self.history + (fb,))


def prepare_context(
    scenario: Scenario,
    policy: CompartmentPolicy,
    finding: CivFinding,
    *,
    strategy: str = "late",
    index: SourceIndex | None = None,
) -> RepairContext:
    """Classify the finding and run the stack analysis against a replay trace."""
    spec = policy.interface
    if spec is None:
        raise AnalysisError("policy carries no interface description")
    civ = classify(finding, spec)
    oracle = oracle_for(civ, mutated_leaf(finding, spec))
    cv = crash_variable(finding.mutation, civ, spec)
    index = index or source_index(scenario, policy)
    outcome = reproduce(scenario, finding)
    roles = site = None
    error = None
    if not outcome.crashed:
        error = "recorded payload no longer crashes the scenario"
    else:
        try:
            result = analyze(finding.report, policy, cv, evidence_from_trace(outcome, cv), index, strategy)
            roles, site, error = result.roles, result.site, result.error
        except AnalysisError as exc:
            error = str(exc)
    symbols = [e.symbol for e in roles.entries] if roles else [f.symbol for f in finding.report.frames]
    sources = {}
    for sym in symbols:
        entry = index.get(sym)
        if entry is not None and entry.available and entry.body:
            sources[sym] = entry.body
    return RepairContext(policy, spec, finding, civ, oracle, roles, site, sources, (), error)


@dataclass(frozen=True)
class RepairPrompt:
    sections: tuple[tuple[str, str], ...]
    directives: Mapping[str, Any]

    @property
    def text(self) -> str:
        return "".join(f"## {title}\n{body.rstrip()}\n\n" for title, body in self.sections)

    def section(self, title: str) -> str:
        for t, body in self.sections:
            if t == title:
                return body
        raise KeyError(title)


_TRUST_NOTES = {
    "sandbox": "The untrusted compartment is isolated to protect the rest of the application from it.",
    "safebox": "A sensitive compartment is isolated; the remaining code is considered potentially hostile.",
    "mutual-distrust": "Every compartment distrusts the others.",
}


def _weak_check(kind: str, expr: str) -> str:
    if kind == "scalar":
        return f"at_least({expr}, 0)"
    return f"not_null({expr})"


def build_prompt(ctx: RepairContext) -> RepairPrompt:
    """Render the repair prompt; identical contexts give identical bytes."""
    pol = ctx.policy
    f = ctx.finding
    untrusted = pol.untrusted.name
    sections: list[tuple[str, str]] = []

    sections.append((
        "Trust model",
        f"Trust model: {pol.trust_model.value}. {_TRUST_NOTES[pol.trust_model.value]}\n"
        f"Compartment '{untrusted}' is untrusted and may be fully controlled by an attacker. "
        f"Its outputs cannot be assumed sanitized, so checks must live on the trusted side. "
        f"Never place a fix inside '{untrusted}'.\n"
        f"Security goals: {', '.join(sorted(pol.security_goals)) or 'none declared'}.",
    ))
    sections.append((
        "Compartments",
        "\n".join(
            f"- {c.name} ({'trusted' if c.trusted else 'UNTRUSTED'}): {', '.join(c.code_units) or '(no code units)'}"
            for c in pol.compartments
        ),
    ))
    fn = ctx.spec.function(f.mutation.entry_function)
    params = "\n".join(f"- {name}: {json.dumps(t.to_dict(), sort_keys=True)}" for name, t in fn.slots())
    sections.append((
        "Interface",
        f"Boundary function {fn.name} (owned by {fn.owner_compartment}).\n{params}",
    ))

    leaf = mutated_leaf(f, ctx.spec)
    guard_expr = None
    if ctx.site is not None and ctx.site.unit_expr:
        guard_expr = ctx.oracle.predicate(ctx.site.unit_expr).render()
    unit = ctx.roles.crash_var.unit_label if ctx.roles else f.mutation.mutated_path
    cls_lines = [
        f"Category: {ctx.civ.category.value}",
        f"Boundary focus: {ctx.civ.boundary_focus}",
        f"Security impact: {ctx.civ.impact} ({impact_summary(ctx.civ, pol)})",
        f"Patching unit: {ctx.civ.patching_unit} -> {unit} at {f.mutation.mutated_path}",
        f"Oracle guard to use: {ctx.oracle.name}" + (f" e.g. {guard_expr}" if guard_expr else ""),
        f"Detectability (advisory): {ctx.civ.detectability}",
    ]
    sections.append(("CIV classification", "\n".join(cls_lines)))

    frames = []
    if ctx.roles is not None:
        rows = []
        for e in ctx.roles.entries:
            where = "untrusted" if e.index is None else f"#{e.index}"
            src = "source" if e.has_source else "no source"
            rows.append(f"- {where} {e.symbol}: {e.role.value} ({src}{', candidate' if e.candidate else ''})")
            frames.append({
                "symbol": e.symbol, "role": e.role.value, "has_source": e.has_source, "candidate": e.candidate,
                "insert_before": e.insert_before, "unit_expr": e.unit_expr,
            })
        if ctx.site is not None:
            rows.append(f"Preferred patch site: {ctx.site.function} ({ctx.site.justification})")
            if ctx.site.low_confidence:
                rows.append("Confidence: low (no frame interacts with the unit)")
        else:
            rows.append(f"No automatic patch site: {ctx.analysis_error}")
        sections.append(("Patch sites", "\n".join(rows)))
    else:
        sections.append(("Patch sites", f"No boundary candidates: {ctx.analysis_error}"))

    sections.append(("Crash report", json.dumps(f.report.to_dict(), indent=2)))
    sections.append(("Mutation log", f.mutation.to_line()))
    sections.append((
        "Source",
        "\n".join(f"// {sym}\n{text.rstrip()}" for sym, text in sorted(ctx.sources.items())) or "(no source available)",
    ))
    if ctx.history:
        fb_lines = []
        for i, fb in enumerate(ctx.history, 1):
            target = fb.patch.target_function if fb.patch else "-"
            line = f"Attempt {i}: patch at {target} -> {fb.status}"
            if fb.status == "partial":
                line += f". The previous patch was partial, counterexample: {fb.counterexample}"
            elif fb.counterexample:
                line += f". Counterexample: {fb.counterexample}"
            if fb.note:
                line += f" ({fb.note})"
            fb_lines.append(line)
            if fb.patch is not None:
                fb_lines.append(fb.patch.body.rstrip())
        sections.append(("Previous attempts", "\n".join(fb_lines)))
    sections.append((
        "Output format",
        f"Reply with exactly one unified diff between the lines {PATCH_BEGIN} and {PATCH_END}.\n"
        f"For the pseudo-code above, add lines of the form "
        f"'guard <predicate>(<args>) on_fail return' before the first use of the unit.",
    ))

    directives = {
        "site": ctx.site.to_dict() if ctx.site else None,
        "guard": guard_expr,
        "leaf_kind": leaf.kind,
        "unit_path": f.mutation.mutated_path,
        "commit": f.mutation.entry_function,
        "frames": frames,
        "sources": dict(sorted(ctx.sources.items())),
    }
    return RepairPrompt(tuple(sections), directives)


# ---------------------------------------------------------------------------
# Backends


class Backend(Protocol):
    id: str

    def complete(self, prompt: RepairPrompt) -> str: ...


def _fenced(diff: str, preamble: str = "Proposed fix:") -> str:
    return f"{preamble}\n{PATCH_BEGIN}\n{diff.rstrip()}\n{PATCH_END}\n"


def _guard_response(prompt: RepairPrompt, symbol: str, insert_before: int, guard: str) -> str:
    source = prompt.directives["sources"].get(symbol)
    if source is None:
        raise BackendError(f"no source for {symbol} in the prompt")
    return _fenced(make_guard_diff(symbol, source, insert_before, f"guard {guard} on_fail return"))


class AwareMockBackend:
    """Deterministic rule-based backend: oracle guard at the preferred site."""

    id = "aware-mock"

    def complete(self, prompt: RepairPrompt) -> str:
        site, guard = prompt.directives.get("site"), prompt.directives.get("guard")
        if site is None or guard is None or site.get("insert_before") is None:
            raise BackendError("prompt names no patch site")
        return _guard_response(prompt, site["function"], site["insert_before"], guard)


NAIVE_CHOICES = ("correct", "sandbox", "null-check", "other")


def apportion(weights: Mapping[str, float], n: int) -> list[str]:
    """Largest-remainder apportionment of ``n`` slots; ties broken by key order."""
    total = sum(weights.values())
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    keys = [k for k in NAIVE_CHOICES if weights.get(k, 0) > 0]
    quotas = {k: weights[k] / total * n for k in keys}
    counts = {k: int(quotas[k]) for k in keys}
    rest = n - sum(counts.values())
    for k in sorted(keys, key=lambda k: (-(quotas[k] - counts[k]), NAIVE_CHOICES.index(k)))[:rest]:
        counts[k] += 1
    return [k for k in keys for _ in range(counts[k])]


class NaiveMockBackend:
    """Emulates compartment-unaware prompting with a seeded weighted schedule.

    Within every block of ``block`` calls the choices follow the weights
    exactly (largest remainder), in a seeded order.
    """

    id = "naive-mock"

    def __init__(self, weights: Mapping[str, float], seed: int = 0, block: int = 10):
        unknown = set(weights) - set(NAIVE_CHOICES)
        if unknown:
            raise ValueError(f"unknown naive-mock choices: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()):
            raise ValueError("weights must be non-negative")
        self.weights = dict(weights)
        self.seed = seed
        self.block = block
        self.calls = 0
        self._schedule: dict[int, list[str]] = {}

    def choice(self, k: int) -> str:
        b = k // self.block
        if b not in self._schedule:
            plan = apportion(self.weights, self.block)
            random.Random(f"{self.seed}:{b}").shuffle(plan)
            self._schedule[b] = plan
        return self._schedule[b][k % self.block]

    def complete(self, prompt: RepairPrompt) -> str:
        k = self.calls
        self.calls += 1
        pick = self.choice(k)
        d = prompt.directives
        rng = random.Random(f"{self.seed}:pick:{k}")
        if pick == "correct":
            return AwareMockBackend().complete(prompt)
        if pick == "sandbox":
            commit = d["commit"]
            path = d["unit_path"]
            guard = "true()" if path.startswith("return") else _weak_check(d["leaf_kind"], path)
            return _guard_response(prompt, commit, 0, guard)
        frames = [f for f in d["frames"] if f["candidate"] and f["has_source"] and f["unit_expr"]
                  and f["insert_before"] is not None]
        if pick == "other":
            preferred = (d.get("site") or {}).get("function")
            frames = [f for f in frames if f["symbol"] != preferred] or frames
        if not frames:
            raise BackendError("no frame available for a naive patch")
        f = frames[rng.randrange(len(frames))]
        return _guard_response(prompt, f["symbol"], f["insert_before"], _weak_check(d["leaf_kind"], f["unit_expr"]))


SYSTEM_MESSAGE = "You repair vulnerabilities in compartmentalized C applications. Answer with a patch only."


def request_body(model: str, prompt: RepairPrompt) -> dict:
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": SYSTEM_MESSAGE},
            {"role": "user", "content": prompt.text},
        ],
    }


def request_key(body: bytes | Mapping) -> str:
    tree = json.loads(body) if isinstance(body, (bytes, str)) else body
    return hashlib.sha256(json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def replay_transport(recordings: Mapping[str, Any]) -> httpx.MockTransport:
    """Transport answering from ``{request-hash: response-json}`` recordings."""

    def handler(request: httpx.Request) -> httpx.Response:
        key = request_key(request.content)
        if key not in recordings:
            return httpx.Response(404, json={"error": f"no recording for request {key}"})
        return httpx.Response(200, json=recordings[key])

    return httpx.MockTransport(handler)


class RemoteBackend:
    """Chat-completions backend; the credential only comes from the environment."""

    def __init__(
        self,
        url: str | None = None,
        model: str = "gpt-4o-mini",
        *,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 120.0,
    ):
        self.url = url or os.environ.get(API_URL_ENV)
        self.model = model
        self.transport = transport
        self.timeout = timeout
        self.id = f"remote:{model}"

    def complete(self, prompt: RepairPrompt) -> str:
        if not self.url:
            raise BackendError(f"no endpoint configured (backend.url or {API_URL_ENV})")
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendError(f"credential missing: set {API_KEY_ENV}")
        body = request_body(self.model, prompt)
        try:
            with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                resp = client.post(self.url, json=body, headers={"Authorization": f"Bearer {key}"})
        except httpx.HTTPError as exc:
            raise BackendError(f"transport failure: {exc}") from None
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise BackendError("response is not a chat-completions document") from None


def extract_diff(response: str) -> str:
    start = response.find(PATCH_BEGIN)
    end = response.find(PATCH_END, start + 1) if start >= 0 else -1
    if start < 0 or end < 0:
        raise BackendError("response contains no fenced diff")
    diff = response[start + len(PATCH_BEGIN):end].strip("\n")
    if not diff.strip():
        raise BackendError("fenced diff is empty")
    return diff + "\n"


def generate_patch(backend: Backend, prompt: RepairPrompt, attempt: int = 1) -> CandidatePatch:
    diff = extract_diff(backend.complete(prompt))
    try:
        target = diff_target(diff)
    except PatchError as exc:
        raise BackendError(str(exc)) from None
    return CandidatePatch("unified-diff", target, diff, backend.id, attempt)
