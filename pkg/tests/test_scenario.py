from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civrepair.errors import ExecutionError, PatchError, ScenarioError
from civrepair.fixtures import FIXTURES, load_fixture
from civrepair.ingest import CrashKind
from civrepair.scenario import (
    GuardPatch,
    Payload,
    Predicate,
    apply_guard_patch,
    execute,
    load_scenario,
    parse_op,
)

APACHE_STACK = (
    "apr_table_get", "log_table_entry", "log_header", "do_errorlog_default",
    "log_error_core", "ap_log_rerror_", "ap_invoke_handler", "ap_process_async_request",
)


def tiny(ops_sink, payload=None, memory=None, handles=()):
    return load_scenario({
        "name": "tiny",
        "start": "main",
        "interface_entry": "plug",
        "memory": memory or {"buf": {"base": "0x1000", "size": 16, "bytes": "abc\u0000"}},
        "handles": list(handles),
        "globals": {},
        "payload": payload or {"return": "0x1000"},
        "functions": {
            "main": {"compartment": "app", "params": [], "ops": ["x = call plug()", "call sink(x)", "return"]},
            "plug": {"compartment": "plugin", "params": [], "ops": ["return"]},
            "sink": {"compartment": "app", "params": ["p"], "ops": ops_sink},
        },
    })


OPS = [
    "deref(p, 8)", "deref(p.a[1], 4, write)", "index(tbl, ch, 8, 4)", "read_cstr(s, 256)",
    "x = call f(a, b.c)", "call g()", "guard is_pointer_mapped(t, 24) on_fail return",
    "guard is_in_domain(i, {1, 2, 3}) on_fail skip", "guard verify_format(h, file) on_fail return",
    "use(x)", "pass(x)", "commit(r.headers_in)", "resolve(h)", "return",
]


class TestOps:
    @pytest.mark.parametrize("line", OPS)
    def test_render_roundtrip(self, line):
        op = parse_op(line)
        assert parse_op(op.render()) == op

    @pytest.mark.parametrize("line", ["deref(p)", "frob(x)", "guard nope(x) on_fail return", "index(a, b)",
                                      "guard not_null(1) on_fail return", "call f(1)"])
    def test_rejects(self, line):
        with pytest.raises(ScenarioError):
            parse_op(line)

    def test_verify_format_kind_is_not_a_reference(self):
        assert parse_op("guard verify_format(h, file) on_fail return").refs() == ("h",)


class TestLoading:
    @pytest.mark.parametrize("name", FIXTURES)
    def test_fixtures_load(self, name):
        s, policy = load_fixture(name)
        assert s.interface_entry in s.functions
        assert not policy.is_trusted(s.interface_entry)

    def test_dangling_callee(self):
        with pytest.raises(ScenarioError, match="dangling"):
            tiny(["call nowhere()"])

    def test_undeclared_variable(self):
        with pytest.raises(ScenarioError, match="undeclared"):
            tiny(["deref(q, 4)"])

    def test_ret_only_from_entry(self):
        with pytest.raises(ScenarioError, match="only the interface entry"):
            tiny(["y = call sink(p)"])

    def test_static_cycle_rejected(self):
        with pytest.raises(ScenarioError):
            tiny(["call sink(p)"])


class TestExecution:
    def test_ok_run(self):
        assert execute(tiny(["deref(p, 16)", "read_cstr(p, 8)"]), tiny(["return"]).payload_template).status == "ok"

    def test_null_and_unmapped_deref(self):
        s = tiny(["deref(p, 8)"])
        for addr in (0, 0x414141410000):
            out = execute(s, Payload({"return": addr}))
            assert out.crashed and out.crash.kind is CrashKind.SEGV_READ and out.crash.fault_address == addr
            assert out.crash.stack == ("sink", "main")

    def test_truncated_region(self):
        out = execute(tiny(["deref(p, 8)"]), Payload({"return": 0x1000 + 12}))
        assert out.crashed

    def test_read_cstr_runs_off_region(self):
        s = tiny(["read_cstr(p, 64)"], memory={"buf": {"base": "0x1000", "size": 4, "bytes": "abcd"}})
        out = execute(s, s.payload_template)
        assert out.crash.kind is CrashKind.OVERFLOW_READ

    def test_index_bounds(self):
        s, _ = load_fixture("codec_index")
        assert execute(s, Payload({"return": 7})).status == "ok"
        assert execute(s, Payload({"return": 8})).crashed
        assert execute(s, Payload({"return": -1})).crashed

    def test_resolve(self):
        s = tiny(["resolve(p)"], payload={"return": "h:file:1"}, handles=["file:1"])
        assert execute(s, s.payload_template).status == "ok"
        assert execute(s, Payload({"return": "file:2"})).crash.kind is CrashKind.ABORT

    def test_guard_skip_and_return(self):
        s = tiny(["guard not_null(p) on_fail skip", "deref(p, 8)", "return"])
        assert execute(s, Payload({"return": 0})).status == "ok"
        assert execute(s, Payload({"return": 0x5})).crashed

    def test_shape_mismatch(self):
        with pytest.raises(ExecutionError):
            execute(tiny(["return"]), Payload({"other": 1}))

    def test_trace_origins(self):
        out = execute(tiny(["use(p)", "return"]), Payload({"return": 0x1000}))
        use = next(e for e in out.trace if e.kind == "use")
        assert use.touched == (("p", "return"),)

    def test_apache_stack_matches_asan_report(self, apache_unmapped):
        s, _, f = apache_unmapped
        assert tuple(fr.symbol for fr in f.report.frames) == APACHE_STACK
        assert execute(s, s.payload_template).status == "ok"

    def test_json_is_deterministic(self, apache_unmapped):
        s, _, f = apache_unmapped
        assert execute(s, f.payload).to_json() == execute(s, f.payload).to_json()

    @given(st.integers(-(2**40), 2**48))
    @settings(max_examples=200, deadline=None)
    def test_deref_crashes_iff_unmapped(self, addr):
        s = tiny(["deref(p, 4)"])
        mapped = 0x1000 <= addr and addr + 4 <= 0x1010
        assert execute(s, Payload({"return": addr})).crashed != mapped


class TestGuardPatch:
    def test_apply_is_pure(self):
        s = tiny(["deref(p, 8)", "return"])
        g = GuardPatch("sink", 0, Predicate("is_pointer_mapped", ("p", 8)))
        patched = apply_guard_patch(s, g)
        assert len(s.functions["sink"].ops) == 2 and len(patched.functions["sink"].ops) == 3
        assert patched.patches == (g.describe(),)
        assert execute(patched, Payload({"return": 0})).status == "ok"

    def test_library_target_rejected(self, apache):
        s, _ = apache
        with pytest.raises(PatchError, match="no source"):
            apply_guard_patch(s, GuardPatch("apr_table_get", 0, Predicate("not_null", ("t",))))

    def test_index_out_of_range(self):
        s = tiny(["return"])
        with pytest.raises(PatchError, match="out of range"):
            apply_guard_patch(s, GuardPatch("sink", 1, Predicate("not_null", ("p",))))

    def test_unbound_variable_rejected(self):
        s = tiny(["return"])
        with pytest.raises(PatchError):
            apply_guard_patch(s, GuardPatch("sink", 0, Predicate("not_null", ("zz",))))
