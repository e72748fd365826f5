import sys
import numpy as np
import pytest
import torch

from samr.phantom import PhantomParams, generate_patient


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_params():
    return PhantomParams(size=64, seed=7)


@pytest.fixture(scope="session")
def lesion_maps(small_params):
    """Lesion-bearing 64x64 label maps from a few phantom patients."""
    maps = []
    for pid in range(6):
        for inst in generate_patient(small_params, pid):
            if (inst.labels == 4).sum() >= 20:
                maps.append(inst.labels)
    assert len(maps) >= 10
    return maps


def random_label_map(rng, h=16, w=16):
    return rng.integers(0, 5, size=(h, w)).astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
