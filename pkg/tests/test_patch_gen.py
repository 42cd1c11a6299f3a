from __future__ import annotations

import json
from collections import Counter

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civrepair.errors import BackendError, PatchError
from civrepair.fixtures import FIXTURES, load_fixture
from civrepair.fuzzer import fuzz_interface
from civrepair.patch_gen import (
    API_KEY_ENV,
    AwareMockBackend,
    CandidatePatch,
    Feedback,
    NaiveMockBackend,
    RemoteBackend,
    apply_candidate,
    apportion,
    build_prompt,
    diff_to_guards,
    extract_diff,
    generate_patch,
    make_guard_diff,
    prepare_context,
    replay_transport,
    request_body,
    request_key,
)

SECTION_ORDER = [
    "Trust model", "Compartments", "Interface", "CIV classification", "Patch sites",
    "Crash report", "Mutation log", "Source", "Output format",
]


@pytest.fixture(scope="module")
def apache_ctx(apache_null):
    s, policy, f = apache_null
    return s, prepare_context(s, policy, f)


class TestPrompt:
    def test_sections_and_content(self, apache_ctx):
        _, ctx = apache_ctx
        prompt = build_prompt(ctx)
        assert [t for t, _ in prompt.sections] == SECTION_ORDER
        cls = prompt.section("CIV classification")
        assert "StructuredPayload" in cls and "apr_table_t *" in cls and "is_pointer_mapped" in cls
        assert "Preferred patch site: log_table_entry" in prompt.section("Patch sites")
        assert "===PATCH-BEGIN===" in prompt.section("Output format")
        assert "mod_markdown" in prompt.section("Trust model")

    def test_deterministic(self, apache_ctx, apache_null):
        s, ctx = apache_ctx
        again = prepare_context(s, apache_null[1], apache_null[2])
        assert build_prompt(ctx).text == build_prompt(again).text
        assert build_prompt(ctx).directives == build_prompt(again).directives

    def test_feedback_section(self, apache_ctx):
        s, ctx = apache_ctx
        patch = generate_patch(NaiveMockBackend({"null-check": 1}), build_prompt(ctx))
        fb = Feedback(patch, "partial", "unmapped-nonnull: r.headers_in=0x414141410000 crashes at apr_table_get")
        text = build_prompt(ctx.with_feedback(fb)).text
        assert "previous patch was partial, counterexample: unmapped-nonnull" in text
        assert build_prompt(ctx.with_feedback(fb)).sections[-2][0] == "Previous attempts"


class TestAwareMock:
    def test_apache_guard(self, apache_ctx):
        s, ctx = apache_ctx
        patch = generate_patch(AwareMockBackend(), build_prompt(ctx))
        assert patch.target_function == "log_table_entry" and patch.form == "unified-diff"
        [g] = diff_to_guards(patch.body, s)
        assert g.predicate.render() == "is_pointer_mapped(r.headers_in, 24)"
        assert g.insert_before_op_index == 0 and g.on_fail == "return"

    def test_ffmpeg_guard_before_cfg_use(self, ffmpeg_null):
        s, policy, f = ffmpeg_null
        ctx = prepare_context(s, policy, f)
        [g] = diff_to_guards(generate_patch(AwareMockBackend(), build_prompt(ctx)).body, s)
        assert g.target_function == "print_all_libs_info"
        assert g.predicate.render() == "is_pointer_mapped(cfg, 1)"
        ops = s.functions["print_all_libs_info"].ops
        assert ops[g.insert_before_op_index - 1].ret == "cfg"  # right after the value arrives

    @pytest.mark.parametrize("name", FIXTURES)
    def test_placement_invariant(self, name):
        s, policy = load_fixture(name)
        for f in fuzz_interface(s, policy.interface, 60, 4):
            ctx = prepare_context(s, policy, f)
            patch = generate_patch(AwareMockBackend(), build_prompt(ctx))
            assert patch.target_function == ctx.site.function
            assert policy.is_trusted(patch.target_function)

    def test_no_site(self, apache_ctx):
        _, ctx = apache_ctx
        from dataclasses import replace

        with pytest.raises(BackendError):
            generate_patch(AwareMockBackend(), build_prompt(replace(ctx, site=None)))


class TestNaiveMock:
    def test_null_check_only(self, apache_ctx):
        s, ctx = apache_ctx
        patch = generate_patch(NaiveMockBackend({"null-check": 1}, seed=3), build_prompt(ctx))
        [g] = diff_to_guards(patch.body, s)
        assert g.predicate.name == "not_null"

    def test_block_counts_exact(self, apache_ctx):
        _, ctx = apache_ctx
        prompt = build_prompt(ctx)
        nv = NaiveMockBackend({"correct": 0.2, "sandbox": 0.5, "other": 0.3}, seed=9)
        targets = [generate_patch(nv, prompt).target_function for _ in range(20)]
        counts = Counter(nv.choice(k) for k in range(20))
        assert counts == {"correct": 4, "sandbox": 10, "other": 6}
        assert targets.count("markdown_output") == 10
        assert targets.count("log_table_entry") == 4

    def test_reproducible(self, apache_ctx):
        _, ctx = apache_ctx
        prompt = build_prompt(ctx)
        runs = []
        for _ in range(2):
            nv = NaiveMockBackend({"correct": 1, "null-check": 1, "other": 1, "sandbox": 1}, seed=5)
            runs.append([nv.complete(prompt) for _ in range(12)])
        assert runs[0] == runs[1]

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            NaiveMockBackend({"magic": 1})
        with pytest.raises(ValueError):
            NaiveMockBackend({"correct": -1})


@given(st.dictionaries(st.sampled_from(["correct", "sandbox", "null-check", "other"]),
                       st.floats(0.01, 10), min_size=1), st.integers(1, 50))
@settings(max_examples=200, deadline=None)
def test_apportion_property(weights, n):
    plan = apportion(weights, n)
    assert len(plan) == n
    total = sum(weights.values())
    for k, w in weights.items():
        assert abs(plan.count(k) - w / total * n) < 1 + 1e-9


class TestDiffs:
    def test_roundtrip_multiple_guards(self, apache_ctx):
        s, _ = apache_ctx
        src = s.functions["log_table_entry"].source_text()
        d1 = make_guard_diff("log_table_entry", src, 0, "guard not_null(r) on_fail return")
        guards = diff_to_guards(d1, s)
        assert guards[0].insert_before_op_index == 0
        patched = apply_candidate(s, CandidatePatch("unified-diff", "log_table_entry", d1, "t", 1))
        assert patched.functions["log_table_entry"].ops[0].kind == "guard"

    def test_context_mismatch(self, apache_ctx):
        s, _ = apache_ctx
        src = s.functions["log_table_entry"].source_text().replace("apr_table_get", "other_fn")
        d = make_guard_diff("log_table_entry", src, 0, "guard not_null(r) on_fail return")
        with pytest.raises(PatchError, match="context"):
            diff_to_guards(d, s)

    def test_non_guard_addition(self, apache_ctx):
        s, _ = apache_ctx
        d = make_guard_diff("log_table_entry", s.functions["log_table_entry"].source_text(), 0, "use(r)")
        with pytest.raises(PatchError, match="only guard"):
            diff_to_guards(d, s)

    def test_removal_rejected(self, apache_ctx):
        s, _ = apache_ctx
        src = s.functions["log_table_entry"].source_text()
        lines = src.splitlines()
        import difflib

        d = "\n".join(difflib.unified_diff(lines, lines[:1] + lines[2:], "a/log_table_entry", "b/log_table_entry",
                                           lineterm="")) + "\n"
        with pytest.raises(PatchError, match="removals"):
            diff_to_guards(d, s)

    def test_unknown_function_and_garbage(self, apache_ctx):
        s, _ = apache_ctx
        d = make_guard_diff("nope", "function nope() {\n    return\n}", 0, "guard true() on_fail return")
        with pytest.raises(PatchError, match="unknown function"):
            diff_to_guards(d, s)
        with pytest.raises(PatchError):
            diff_to_guards("not a diff", s)

    def test_extract(self):
        assert extract_diff("x\n===PATCH-BEGIN===\n--- a/f\n+++ b/f\n===PATCH-END===\n").startswith("--- a/f")
        for bad in ("no fences", "===PATCH-BEGIN===\n\n===PATCH-END===", "===PATCH-END===\n===PATCH-BEGIN==="):
            with pytest.raises(BackendError):
                extract_diff(bad)


class _Canned:
    id = "canned"

    def __init__(self, text):
        self.text = text

    def complete(self, prompt):
        return self.text


def test_generation_failure_is_backend_error(apache_ctx):
    _, ctx = apache_ctx
    with pytest.raises(BackendError):
        generate_patch(_Canned("I would add a check."), build_prompt(ctx))


class TestRemote:
    def test_replay_fixture(self, apache_ctx, monkeypatch):
        _, ctx = apache_ctx
        prompt = build_prompt(ctx)
        reply = AwareMockBackend().complete(prompt)
        body = request_body("m1", prompt)
        recordings = {request_key(body): {"choices": [{"message": {"role": "assistant", "content": reply}}]}}
        monkeypatch.setenv(API_KEY_ENV, "test-key")
        backend = RemoteBackend("https://llm.invalid/v1/chat", "m1", transport=replay_transport(recordings))
        patch = generate_patch(backend, prompt)
        assert patch.target_function == "log_table_entry" and patch.backend == "remote:m1"

    def test_unrecorded_request(self, apache_ctx, monkeypatch):
        _, ctx = apache_ctx
        monkeypatch.setenv(API_KEY_ENV, "k")
        backend = RemoteBackend("https://llm.invalid/v1/chat", "m2", transport=replay_transport({}))
        with pytest.raises(BackendError, match="HTTP 404"):
            backend.complete(build_prompt(ctx))

    def test_missing_credential(self, apache_ctx, monkeypatch):
        _, ctx = apache_ctx
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        with pytest.raises(BackendError, match="credential"):
            RemoteBackend("https://llm.invalid", "m").complete(build_prompt(ctx))

    def test_transport_failure(self, apache_ctx, monkeypatch):
        _, ctx = apache_ctx
        monkeypatch.setenv(API_KEY_ENV, "k")

        def boom(request):
            raise httpx.ConnectError("refused", request=request)

        backend = RemoteBackend("https://llm.invalid", "m", transport=httpx.MockTransport(boom))
        with pytest.raises(BackendError, match="transport"):
            backend.complete(build_prompt(ctx))

    def test_request_key_is_canonical(self):
        a = json.dumps({"b": 1, "a": [1, 2]}).encode()
        b = json.dumps({"a": [1, 2], "b": 1}, indent=2).encode()
        assert request_key(a) == request_key(b)
