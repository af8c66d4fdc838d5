import os
from pathlib import Path

import pytest
import torch

from cove.data import build_dataset, load_interactions, split

DATA = Path(__file__).parent / "data"

_acceptance: dict[str, str] = {}


@pytest.fixture(scope="session")
def toy_path() -> Path:
    return DATA / "toy_sessions.csv"


@pytest.fixture(scope="session")
def tiny_path() -> Path:
    return DATA / "tiny_sessions.csv"


@pytest.fixture(scope="session")
def toy_dataset(toy_path):
    return build_dataset(load_interactions(toy_path))


@pytest.fixture(scope="session")
def toy_split(toy_dataset):
    return split(toy_dataset, seed=0)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = report.outcome.upper()
        if report.skipped and isinstance(report.longrepr, tuple):
            status = f"SKIPPED ({report.longrepr[2].removeprefix('Skipped: ')})"
        _acceptance[marker] = status


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        rep.acceptance = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, status in _acceptance.items():
        tr.write_line(f"{'PASS' if status == 'PASSED' else status:<10} {name}")
    if not (os.environ.get("COVE_DIGINETICA") and os.environ.get("COVE_RETAILROCKET")):
        tr.write_line("NOTE: raw Diginetica/RetailRocket data not supplied (COVE_DIGINETICA / COVE_RETAILROCKET); "
                      "the bundled toy fixture substitutes for the dataset-scale criteria.")
