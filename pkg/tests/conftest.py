import numpy as np
import pytest

from voxlevel.dsp import MelConfig
from voxlevel.manifest import read_manifest
from voxlevel.synth import SynthSpec, synthesize_corpus
from voxlevel.trainer import compute_features


def tiny_spec(**overrides) -> SynthSpec:
    base = dict(n_speakers=2, files_per_speaker=5, duration_s=1.6, gain_mode="speaker", seed=3)
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Ten short files from two speakers, written once per session."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    synthesize_corpus(tiny_spec(), root)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    return read_manifest(tiny_corpus / "manifest.jsonl")


@pytest.fixture(scope="session")
def tiny_features(tiny_manifest):
    return compute_features(tiny_manifest, MelConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
