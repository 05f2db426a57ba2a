import numpy as np
import pytest

from medpatch.data import GeneratorConfig, generate_dataset, split_dataset
from medpatch.unimodal import EncoderStub


@pytest.fixture(scope="session")
def tiny():
    """Small 4-modality, 2-class dataset with its split and encoder stubs."""
    cfg = GeneratorConfig(n_samples=240, dim=6, token_range=(2, 5), n_classes=2, prevalence=[0.3, 0.5],
                          signal=[0.8, 0.5, 0.6, 0.7], missing=[0.0, 0.3, 0.2, 0.2], seed=5)
    ds = generate_dataset(cfg)
    split = split_dataset(ds, seed=5)
    stubs = {m: EncoderStub(m, 6, 5, seed=j) for j, m in enumerate(ds.modalities)}
    return {
        "dataset": ds,
        "train": ds.subset(split.train),
        "val": ds.subset(split.validation),
        "test": ds.subset(split.test),
        "stubs": stubs,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
