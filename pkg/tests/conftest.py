import numpy as np
import pytest
import torch

from eegrecon.core import PreprocessConfig
from eegrecon.dataset import SyntheticSpec, generate_synthetic, make_splits
from eegrecon.providers import StandInProvider

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The desk-scale synthetic dataset: 4 classes, 16 channels, 64 samples, 32 recordings per class."""
    out = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic(SyntheticSpec(seed=0), out, PreprocessConfig())
    return out, manifest


@pytest.fixture(scope="session")
def split_manifest(synth_root):
    _, manifest = synth_root
    return make_splits(manifest, (0.5, 0.25, 0.25), seed=7)


@pytest.fixture(scope="session")
def provider():
    return StandInProvider(d_img=32, d_text=16, n_tokens=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
