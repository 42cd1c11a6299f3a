"""``civrepair`` command line: each pipeline stage plus the end-to-end repair.

Options can come from a JSON config file (``--config``); flags win. Every
artifact is written under ``--out``. Exit codes: 0 fixed / success,
2 partial or not fixed, 3 patch rejected for its placement, 4 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .classifier import classify, impact_summary, mutated_leaf, oracle_for
from .errors import BackendError, CivRepairError
from .fixtures import FIXTURES, load_fixture
from .fuzzer import CivFinding, fuzz_interface, load_finding_file, reproduce, write_findings
from .ingest import CompartmentPolicy, load_json, parse_policy
from .patch_gen import (
    AwareMockBackend,
    CandidatePatch,
    NaiveMockBackend,
    RemoteBackend,
    diff_target,
    prepare_context,
)
from .scenario import Scenario, load_scenario_file, source_index
from .stack_analyzer import analyze, crash_variable, evidence_from_source, evidence_from_trace
from .validator import (
    EXIT_INPUT,
    EXIT_REJECTED,
    bench_placement,
    check_placement,
    exit_code,
    format_bench_table,
    repair_loop,
    validate,
)

logger = logging.getLogger("civrepair")

DEFAULTS: dict[str, Any] = {
    "scenario": "apache_markdown",
    "policy": None,
    "out": "civrepair-out",
    "budget": 500,
    "seed": 0,
    "workers": 1,
    "finding": None,
    "site_strategy": "late",
    "evidence": "trace",
    "backend": "aware-mock",
    "backend_url": None,
    "backend_model": "gpt-4o-mini",
    "naive_weights": "null-check=1",
    "naive_seed": 0,
    "max_iter": 5,
    "probe_budget": 32,
    "extra_probes": 0,
    "iterations": 10,
    "patch": None,
}


class UsageError(CivRepairError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors are input errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getattr__(self, name: str) -> Any:
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None


def load_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and explicit flags, in that order."""
    values = dict(DEFAULTS)
    if args.config:
        try:
            tree = load_json(Path(args.config).read_bytes(), "config")
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        if not isinstance(tree, Mapping):
            raise UsageError("config: top level must be an object")
        backend = tree.get("backend", {})
        flat = {k.replace("-", "_"): v for k, v in tree.items() if k != "backend"}
        if isinstance(backend, Mapping):
            for key in ("url", "model", "kind", "seed", "weights"):
                if key in backend:
                    flat[{"kind": "backend", "seed": "naive_seed", "weights": "naive_weights"}.get(key, f"backend_{key}")] = backend[key]
        elif isinstance(backend, str):
            flat["backend"] = backend
        unknown = set(flat) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"config: unknown keys {sorted(unknown)}")
        values.update(flat)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(values)


def load_inputs(cfg: RunConfig) -> tuple[Scenario, CompartmentPolicy]:
    """Resolve ``--scenario`` as a bundled name, a directory or a scenario file."""
    ref = cfg.scenario
    policy_path = Path(cfg.policy) if cfg.policy else None
    if ref in FIXTURES and not Path(ref).exists():
        scenario, policy = load_fixture(ref)
        if policy_path is not None:
            policy = parse_policy(_read(policy_path))
        return scenario, policy
    path = Path(ref)
    if path.is_dir():
        policy_path = policy_path or path / "policy.json"
        path = path / "scenario.json"
    if policy_path is None:
        policy_path = path.with_name("policy.json")
    scenario = load_scenario_file(_existing(path))
    return scenario, parse_policy(_read(policy_path))


def _existing(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    return path


def _read(path: Path) -> bytes:
    return _existing(path).read_bytes()


def parse_weights(spec: Any) -> dict[str, float]:
    if isinstance(spec, Mapping):
        return {str(k): float(v) for k, v in spec.items()}
    out = {}
    for part in str(spec).split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        if not sep:
            raise UsageError(f"naive weights: expected name=weight, got {part!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"naive weights: {val!r} is not a number") from None
    return out


def make_backend(cfg: RunConfig, kind: str | None = None):
    kind = kind or cfg.backend
    if kind == "aware-mock":
        return AwareMockBackend()
    if kind == "naive-mock":
        try:
            return NaiveMockBackend(parse_weights(cfg.naive_weights), int(cfg.naive_seed))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if kind == "remote":
        return RemoteBackend(cfg.backend_url, cfg.backend_model)
    raise UsageError(f"unknown backend {kind!r}")


def select_finding(cfg: RunConfig, scenario: Scenario, policy: CompartmentPolicy) -> CivFinding:
    """The ``--finding`` file, or the first finding of a seeded campaign."""
    if cfg.finding:
        return load_finding_file(_existing(Path(cfg.finding)), policy.interface)
    findings = fuzz_interface(scenario, _spec(policy), int(cfg.budget), int(cfg.seed), workers=int(cfg.workers))
    if not findings:
        raise UsageError("the fuzzing campaign found no CIV to work on")
    return findings[0]


def _spec(policy: CompartmentPolicy):
    if policy.interface is None:
        raise UsageError("policy carries no interface description")
    return policy.interface


def _out(cfg: RunConfig, *parts: str) -> Path:
    path = Path(cfg.out).joinpath(*parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(args: argparse.Namespace, doc: Any, text: str) -> None:
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(text.rstrip("\n"))


# ---------------------------------------------------------------------------
# Commands


def cmd_fuzz(args: argparse.Namespace, cfg: RunConfig) -> int:
    if int(cfg.budget) < 1:
        raise UsageError("--budget must be at least 1")
    scenario, policy = load_inputs(cfg)
    findings = fuzz_interface(scenario, _spec(policy), int(cfg.budget), int(cfg.seed), workers=int(cfg.workers))
    paths = write_findings(findings, Path(cfg.out) / "findings")
    doc = {"scenario": scenario.name, "findings": [str(p) for p in paths], "count": len(paths)}
    lines = [f"{len(paths)} finding(s) on {scenario.name}"]
    lines += [f"  {p}  {' '.join(f.key)}" for p, f in zip(paths, findings)]
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_classify(args: argparse.Namespace, cfg: RunConfig) -> int:
    scenario, policy = load_inputs(cfg)
    f = select_finding(cfg, scenario, policy)
    c = classify(f, _spec(policy))
    oracle = oracle_for(c, mutated_leaf(f, _spec(policy)))
    doc = {**c.to_dict(), "oracle_guard": oracle.name, "impact_summary": impact_summary(c, policy),
           "mutation": f.mutation.to_line()}
    text = "\n".join([
        f"category:       {c.category.value}",
        f"boundary focus: {c.boundary_focus}",
        f"impact:         {c.impact}  ({impact_summary(c, policy)})",
        f"patching unit:  {c.patching_unit}",
        f"oracle guard:   {oracle.name}",
        f"detectability:  {c.detectability} (advisory)",
    ])
    _emit(args, doc, text)
    return 0


def cmd_analyze(args: argparse.Namespace, cfg: RunConfig) -> int:
    scenario, policy = load_inputs(cfg)
    spec = _spec(policy)
    f = select_finding(cfg, scenario, policy)
    c = classify(f, spec)
    cv = crash_variable(f.mutation, c, spec)
    index = source_index(scenario, policy)
    if cfg.evidence == "trace":
        ev = evidence_from_trace(reproduce(scenario, f), cv)
    elif cfg.evidence == "source":
        ev = evidence_from_source(f.report, index, cv, spec)
    else:
        raise UsageError(f"unknown evidence layer {cfg.evidence!r}")
    result = analyze(f.report, policy, cv, ev, index, cfg.site_strategy)
    doc = {"roles": result.roles.to_dict(), "site": result.site.to_dict() if result.site else None,
           "error": result.error}
    lines = [f"unit: {cv.unit_label} ({cv.unit})"]
    for e in result.roles.entries:
        where = "untrusted" if e.index is None else f"#{e.index}"
        lines.append(f"  {where:<10} {e.symbol:<28} {e.role.value}")
    if result.site:
        lines.append(f"patch site: {result.site.function} ({result.site.justification})")
    else:
        lines.append(f"patch site: none ({result.error})")
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_repair(args: argparse.Namespace, cfg: RunConfig) -> int:
    scenario, policy = load_inputs(cfg)
    f = select_finding(cfg, scenario, policy)
    backend = make_backend(cfg)
    ctx = prepare_context(scenario, policy, f, strategy=cfg.site_strategy)
    outcome = repair_loop(ctx, scenario, backend, int(cfg.max_iter), int(cfg.probe_budget),
                          extra=int(cfg.extra_probes), seed=int(cfg.seed))
    _out(cfg, "repair", "outcome.json").write_text(json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n")
    if outcome.accepted is not None:
        artifact = _out(cfg, "repair", "accepted.patch")
        artifact.write_text(outcome.accepted.body)
        text = f"fixed after {len(outcome.attempts)} iteration(s): {outcome.accepted.target_function}\npatch: {artifact}"
    else:
        artifact = _out(cfg, "repair", "report.txt")
        artifact.write_text(outcome.report)
        text = outcome.report + f"\nreport: {artifact}"
    _emit(args, outcome.to_dict(), text)
    return outcome.exit_code


def cmd_validate(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not cfg.patch:
        raise UsageError("validate needs --patch")
    scenario, policy = load_inputs(cfg)
    f = select_finding(cfg, scenario, policy)
    body = _read(Path(cfg.patch)).decode("utf-8", errors="replace")
    try:
        target = diff_target(body)
    except CivRepairError as exc:
        raise UsageError(str(exc)) from None
    patch = CandidatePatch("unified-diff", target, body, "file", 1)
    ctx = prepare_context(scenario, policy, f, strategy=cfg.site_strategy)
    placement = check_placement(patch, ctx.site, policy)
    doc: dict[str, Any] = {"placement": placement.to_dict()}
    if placement.trust_broken:
        doc["verdict"] = {"status": "rejected-placement"}
        _emit(args, doc, f"rejected: {target} belongs to the untrusted compartment")
        return EXIT_REJECTED
    verdict = validate(scenario, patch, f, ctx.civ, int(cfg.probe_budget), spec=_spec(policy),
                       extra=int(cfg.extra_probes), seed=int(cfg.seed))
    doc["verdict"] = verdict.to_dict()
    lines = [f"placement: {'preferred site' if placement.placement_ok else 'not the preferred site'}",
             f"verdict: {verdict.status} ({verdict.probes_run} probes)"]
    if verdict.diagnostic:
        lines.append(f"  {verdict.diagnostic}")
    lines += [f"  counterexample: {c.description}" for c in verdict.counterexamples]
    _out(cfg, "validate", "verdict.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(args, doc, "\n".join(lines))
    return exit_code(verdict.status)


def cmd_bench_placement(args: argparse.Namespace, cfg: RunConfig) -> int:
    if int(cfg.iterations) < 1:
        raise UsageError("--iterations must be at least 1")
    scenario, policy = load_inputs(cfg)
    f = select_finding(cfg, scenario, policy)
    ctx = prepare_context(scenario, policy, f, strategy=cfg.site_strategy)
    kinds = args.backends or [cfg.backend]
    rows = [bench_placement(ctx, scenario, make_backend(cfg, k), int(cfg.iterations), int(cfg.probe_budget))
            for k in kinds]
    doc = {"scenario": scenario.name, "rows": [r.to_dict() for r in rows]}
    _out(cfg, "bench", "placement.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(args, doc, format_bench_table(rows))
    return 0


COMMANDS = {
    "fuzz": cmd_fuzz,
    "classify": cmd_classify,
    "analyze": cmd_analyze,
    "repair": cmd_repair,
    "validate": cmd_validate,
    "bench-placement": cmd_bench_placement,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its keys")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--out", help="output directory (default civrepair-out)")
    common.add_argument("--scenario", help=f"bundled fixture ({', '.join(FIXTURES)}), directory or scenario file")
    common.add_argument("--policy", help="policy file (default: policy.json next to the scenario)")
    common.add_argument("--seed", type=int, help="campaign seed")
    common.add_argument("--budget", type=int, help="fuzzing budget (injections)")
    common.add_argument("--workers", type=int, help="parallel fuzzing workers")
    common.add_argument("--finding", help="finding file; default: first finding of a seeded campaign")
    common.add_argument("-v", "--verbose", action="store_true")

    site = argparse.ArgumentParser(add_help=False)
    site.add_argument("--site-strategy", choices=("late", "early"), default=None)

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=("aware-mock", "naive-mock", "remote"))
    backend.add_argument("--backend-url")
    backend.add_argument("--backend-model")
    backend.add_argument("--naive-weights", help="e.g. correct=0.2,sandbox=0.5,other=0.3")
    backend.add_argument("--naive-seed", type=int)
    backend.add_argument("--probe-budget", type=int)
    backend.add_argument("--extra-probes", type=int, help="seeded random probes on top of the class family")

    parser = _Parser(prog="civrepair", description="Find and repair compartment interface vulnerabilities.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("fuzz", parents=[common], help="fuzz the interface and write finding files")
    sub.add_parser("classify", parents=[common], help="classify a finding")
    p = sub.add_parser("analyze", parents=[common, site], help="assign stack roles and pick a patch site")
    p.add_argument("--evidence", choices=("trace", "source"))
    p = sub.add_parser("repair", parents=[common, site, backend], help="run the repair loop")
    p.add_argument("--max-iter", type=int)
    p = sub.add_parser("validate", parents=[common, site, backend], help="validate a patch file")
    p.add_argument("--patch", help="unified diff against the rendered scenario sources")
    p = sub.add_parser("bench-placement", parents=[common, site, backend], help="score patch placement")
    p.add_argument("--iterations", type=int)
    p.add_argument("--backends", nargs="+", choices=("aware-mock", "naive-mock", "remote"),
                   help="benchmark several backends in one table")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except BackendError as exc:
        print(f"civrepair: backend error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CivRepairError, OSError) as exc:
        print(f"civrepair: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
