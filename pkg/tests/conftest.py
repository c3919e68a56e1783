import numpy as np
import pytest

from helpers import micro_config, toy_config
from scenemotion.dataset import generate_dataset
from scenemotion.model import build_geometry
from scenemotion.train import make_batch


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_ds(toy_cfg):
    return generate_dataset(toy_cfg.data, 0)


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config()


@pytest.fixture(scope="session")
def micro_ds(micro_cfg):
    return generate_dataset(micro_cfg.data, 0)


@pytest.fixture
def micro_batch(micro_cfg, micro_ds):
    samples = micro_ds.samples[:2]
    geoms = [build_geometry(s.cloud.coords, micro_cfg.model) for s in samples]
    return make_batch(samples, geoms)


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one pass/fail line; a test that errors first records FAIL."""
    seen = []

    def record(n, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        seen.append(n)
        _CRITERIA.append(line)
        print(line)
        return ok

    yield record
    if not seen:
        _CRITERIA.append("criterion ?: FAIL  (errored before reporting)")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
