from __future__ import annotations

import pytest

from civrepair.classifier import classify
from civrepair.errors import AnalysisError
from civrepair.fixtures import FIXTURES, load_fixture
from civrepair.fuzzer import CivFinding, fuzz_interface, reproduce
from civrepair.ingest import MutationLog, parse_policy
from civrepair.scenario import Payload, execute, load_scenario, source_index
from civrepair.stack_analyzer import (
    Role,
    analyze,
    assign_roles,
    boundary_candidates,
    crash_variable,
    evidence_from_source,
    evidence_from_trace,
    select_patch_site,
)
from oracles import op_scan_roles, random_scenario

EXPECTED_APACHE = {
    "apr_table_get": "CONSUME",
    "log_table_entry": "FORWARD",
    "log_header": "PRESENCE",
    "do_errorlog_default": "PRESENCE",
    "log_error_core": "PRESENCE",
    "ap_log_rerror_": "PRESENCE",
    "ap_invoke_handler": "PRESENCE",
    "markdown_output": "COMMIT",
}


def run(s, policy, f, layer="trace", strategy="late"):
    c = classify(f, policy.interface)
    cv = crash_variable(f.mutation, c, policy.interface)
    index = source_index(s, policy)
    if layer == "trace":
        ev = evidence_from_trace(reproduce(s, f), cv)
    else:
        ev = evidence_from_source(f.report, index, cv, policy.interface)
    return analyze(f.report, policy, cv, ev, index, strategy)


@pytest.mark.parametrize("layer", ["trace", "source"])
def test_apache_roles(apache_unmapped, layer):
    s, policy, f = apache_unmapped
    a = run(s, policy, f, layer)
    assert a.roles.as_map() == EXPECTED_APACHE
    assert [c.symbol for c in a.candidates] == [
        "log_table_entry", "log_header", "do_errorlog_default", "log_error_core", "ap_log_rerror_", "ap_invoke_handler",
    ]
    assert a.site.function == "log_table_entry" and a.site.role is Role.FORWARD
    assert "fallback" in a.site.justification
    assert a.roles.crash_var.unit_label == "apr_table_t *"
    # the pre-injection frame never holds the unit
    assert "ap_process_async_request" not in a.roles.as_map()


@pytest.mark.parametrize("name", FIXTURES)
def test_source_layer_agrees_with_trace(name):
    s, policy = load_fixture(name)
    for f in fuzz_interface(s, policy.interface, 100, 2):
        t, src = run(s, policy, f, "trace"), run(s, policy, f, "source")
        assert t.roles.as_map() == src.roles.as_map()
        assert t.site == src.site


def test_expected_sites():
    sites = {}
    for name in FIXTURES:
        s, policy = load_fixture(name)
        f = fuzz_interface(s, policy.interface, 50, 0)[0]
        sites[name] = run(s, policy, f).site
    assert sites["ffmpeg_libavcodec"].function == "print_all_libs_info"
    assert sites["ffmpeg_libavcodec"].unit_expr == "cfg"
    assert sites["codec_index"].function == "lookup_channel"
    assert sites["codec_index"].role is Role.CONSUME
    assert sites["vfs_handle"].function == "read_document"


def _chain(main_module="", mid_module="", wrapper=False):
    """main -> mid -> lib_get, with the unit returned by plug."""
    funcs = {
        "main": {"compartment": "app", "params": [], "module": main_module,
                 "ops": ["x = call plug()", "call mid(x)", "return"]},
        "mid": {"compartment": "app", "params": ["p"], "module": mid_module, "ops": ["call lib_get(p)", "return"]},
        "lib_get": {"compartment": "app", "params": ["t"], "module": "/usr/lib/libx.so", "ops": ["deref(t, 8)"]},
        "plug": {"compartment": "plugin", "params": [], "ops": ["return"]},
    }
    if wrapper:
        funcs["main"]["ops"] = ["call plug_wrap()", "return"]
        funcs["plug_wrap"] = {"compartment": "plugin", "params": [],
                              "ops": ["x = call plug()", "deref(x, 8)", "return"]}
    s = load_scenario({
        "name": "chain", "start": "main", "interface_entry": "plug",
        "memory": {"m": {"base": "0x1000", "size": 16}}, "globals": {},
        "payload": {"return": "0x1000"}, "functions": funcs,
    })
    policy = parse_policy({
        "compartments": [{"name": "app", "trust": "trusted", "code_units": ["main", "mid", "lib_*"]},
                         {"name": "plugin", "trust": "untrusted", "code_units": ["plug*"]}],
        "trust_model": "sandbox", "security_goals": ["availability"],
        "interface": {"functions": [{"name": "plug", "owner_compartment": "plugin", "params": [],
                                     "returns": {"kind": "pointer", "target": "T", "size": 8}}]},
    })
    payload = Payload({"return": 0})
    out = execute(s, payload)
    log = MutationLog("plug", "return", 0x1000, 0, "ptr-null")
    return s, policy, CivFinding(out.to_report(s), log, payload, "chain", 0, 0)


def test_late_and_early_strategies():
    s, policy, f = _chain()
    assert run(s, policy, f, strategy="late").site.function == "mid"
    assert run(s, policy, f, strategy="early").site.function == "main"


def test_human_review_when_nothing_has_source():
    s, policy, f = _chain(main_module="/usr/lib/libmain.so", mid_module="/usr/lib/libmid.so")
    a = run(s, policy, f)
    assert a.site is None and "human review required" in a.error


def test_no_trusted_candidate():
    s, policy, f = _chain(wrapper=True)
    with pytest.raises(AnalysisError, match="no trusted-side patch site"):
        run(s, policy, f)


def test_unknown_strategy(apache_unmapped):
    s, policy, f = apache_unmapped
    with pytest.raises(ValueError):
        select_patch_site(run(s, policy, f).roles, "middle")


@pytest.mark.parametrize("seed", range(60))
def test_random_scenarios_match_op_scan(seed):
    s, policy, unit, payload = random_scenario(seed)
    out = execute(s, payload)
    assert out.crashed
    log = MutationLog(s.interface_entry, unit, s.payload_template.get(unit), 0, "ptr-null")
    f = CivFinding(out.to_report(s), log, payload, s.name, 0, 0)
    cv = crash_variable(log, classify(f, policy.interface), policy.interface)
    ev = evidence_from_trace(out, cv)
    expected = op_scan_roles(s, policy, out.crash.stack, out.crash.faulting_op[1], unit)
    try:
        roles = assign_roles(boundary_candidates(f.report, policy, cv, ev), cv, ev, f.report, policy)
    except AnalysisError:
        assert expected == {s.interface_entry: "COMMIT"}
        return
    assert roles.as_map() == expected
    try:
        site = select_patch_site(roles)
    except AnalysisError:
        return
    assert policy.is_trusted(site.function)

