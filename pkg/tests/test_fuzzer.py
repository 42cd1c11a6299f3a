from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civrepair.fixtures import FIXTURES, load_fixture
from civrepair.fuzzer import (
    STRATEGIES,
    fuzz_interface,
    leaf_paths,
    load_finding,
    mutate,
    reproduce,
    strategies_for,
    write_findings,
)
from civrepair.scenario import execute


def brute_force_keys(name):
    """Every (crash site, path, strategy) reachable with one mutation, by exhaustive injection."""
    s, policy = load_fixture(name)
    keys = set()
    for path, leaf in leaf_paths(policy.interface.function(s.interface_entry)):
        for st_ in strategies_for(leaf.kind):
            p = mutate(s.payload_template, st_, path, random.Random(0), leaf=leaf, scenario=s)
            out = execute(s, p)
            if out.crashed:
                keys.add((out.crash.stack[0], path, st_.id))
    return keys


@pytest.mark.parametrize("name", FIXTURES)
def test_full_budget_matches_brute_force(name):
    s, policy = load_fixture(name)
    found = {f.key for f in fuzz_interface(s, policy.interface, 200, 11)}
    assert found == brute_force_keys(name)


def test_same_seed_is_byte_identical(apache):
    s, policy = apache
    a = [f.to_json() for f in fuzz_interface(s, policy.interface, 300, 7)]
    b = [f.to_json() for f in fuzz_interface(s, policy.interface, 300, 7)]
    assert a == b and a


def test_workers_do_not_change_results(apache):
    s, policy = apache
    a = [f.to_json() for f in fuzz_interface(s, policy.interface, 120, 3)]
    b = [f.to_json() for f in fuzz_interface(s, policy.interface, 120, 3, workers=4)]
    assert a == b


def test_budget_must_be_positive(apache):
    s, policy = apache
    with pytest.raises(ValueError):
        fuzz_interface(s, policy.interface, 0, 1)


def test_findings_replay(apache):
    s, policy = apache
    for f in fuzz_interface(s, policy.interface, 100, 5):
        out = reproduce(s, f)
        assert out.crashed and out.to_report(s) == f.report
        assert f.payload.provenance == (f.seed, f.index)


def test_finding_file_roundtrip(apache, tmp_path):
    s, policy = apache
    findings = fuzz_interface(s, policy.interface, 100, 5)
    paths = write_findings(findings, tmp_path)
    again = write_findings(findings, tmp_path)  # identical rerun is accepted
    assert paths == again
    for p, f in zip(paths, findings):
        loaded = load_finding(p.read_bytes(), policy.interface)
        assert loaded.to_json() == f.to_json()
    paths[0].write_text("{}")
    with pytest.raises(FileExistsError):
        write_findings(findings, tmp_path)


def test_strategy_catalogue():
    kinds = {s.applicable_type for s in STRATEGIES}
    assert kinds == {"pointer", "scalar", "handle"}
    assert {s.id for s in strategies_for("pointer")} == {"ptr-null", "ptr-unmapped", "ptr-misaligned", "ptr-truncated"}


@given(seed=st.integers(0, 2**32), which=st.integers(0, 100))
@settings(max_examples=100, deadline=None)
def test_single_mutation_property(seed, which):
    s, policy = load_fixture("apache_markdown")
    leaves = leaf_paths(policy.interface.function(s.interface_entry))
    path, leaf = leaves[which % len(leaves)]
    strats = strategies_for(leaf.kind)
    strat = strats[seed % len(strats)]
    p = mutate(s.payload_template, strat, path, random.Random(seed), leaf=leaf, scenario=s)
    for other, _ in leaves:
        if other != path:
            assert p.get(other) == s.payload_template.get(other)
    if strat.id == "ptr-unmapped":
        assert s.region_at(p.get(path)) is None and p.get(path) != 0
