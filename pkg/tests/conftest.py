"""Shared fixtures: small synthetic datasets built once per session."""

from __future__ import annotations

import numpy as np
import pytest

from headgrow import grow
from headgrow.ingest import load_collection
from headgrow.synth import make_dataset, make_scene


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """64x64, 40 lights x 7 poses; fast enough for functional grow/eval/cli tests."""
    out = tmp_path_factory.mktemp("small")
    make_dataset(make_scene(n_lights=40, image_size=(64, 64), seed=3), out)
    return out


@pytest.fixture(scope="session")
def small_clusters(small_dataset):
    return load_collection(small_dataset / "manifest.json")


@pytest.fixture(scope="session")
def small_state(small_clusters):
    return grow.reconstruct(small_clusters)


@pytest.fixture(scope="session")
def e2e_dataset(tmp_path_factory):
    """The end-to-end setting: 128x128, 100 lights x 7 poses, noise-free."""
    out = tmp_path_factory.mktemp("e2e")
    make_dataset(make_scene(n_lights=100, image_size=(128, 128), seed=0), out)
    return out


@pytest.fixture(scope="session")
def e2e_clusters(e2e_dataset):
    return load_collection(e2e_dataset / "manifest.json")


@pytest.fixture(scope="session")
def e2e_state(e2e_clusters):
    return grow.reconstruct(e2e_clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines, which output capture would otherwise hide."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
