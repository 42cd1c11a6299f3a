from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from civrepair.fixtures import load_fixture  # noqa: E402
from civrepair.fuzzer import fuzz_interface  # noqa: E402


def finding_for(name: str, strategy_id: str, budget: int = 200, seed: int = 0):
    s, policy = load_fixture(name)
    for f in fuzz_interface(s, policy.interface, budget, seed):
        if f.mutation.strategy == strategy_id:
            return s, policy, f
    raise LookupError(f"{name}: no {strategy_id} finding")


@pytest.fixture(scope="session")
def apache():
    return load_fixture("apache_markdown")


@pytest.fixture(scope="session")
def apache_null():
    return finding_for("apache_markdown", "ptr-null")


@pytest.fixture(scope="session")
def apache_unmapped():
    return finding_for("apache_markdown", "ptr-unmapped")


@pytest.fixture(scope="session")
def ffmpeg_null():
    return finding_for("ffmpeg_libavcodec", "ptr-null")


@pytest.fixture(scope="session")
def codec_ood():
    return finding_for("codec_index", "scalar-out-of-domain")


@pytest.fixture(scope="session")
def codec_negative():
    return finding_for("codec_index", "scalar-negative")


@pytest.fixture(scope="session")
def vfs_stale():
    return finding_for("vfs_handle", "handle-stale-id")
