"""Bundled scenarios: each directory holds ``scenario.json`` and ``policy.json``."""

from __future__ import annotations

from importlib import resources

from ..ingest import CompartmentPolicy, parse_policy
from ..scenario import Scenario, load_scenario

FIXTURES = ("apache_markdown", "ffmpeg_libavcodec", "codec_index", "vfs_handle")


def fixture_text(name: str, part: str) -> str:
    if name not in FIXTURES:
        raise KeyError(f"no bundled fixture named {name!r}")
    return resources.files(__name__).joinpath(name, f"{part}.json").read_text(encoding="utf-8")


def load_fixture(name: str) -> tuple[Scenario, CompartmentPolicy]:
    return load_scenario(fixture_text(name, "scenario")), parse_policy(fixture_text(name, "policy"))
