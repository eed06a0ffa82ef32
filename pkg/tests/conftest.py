import pytest
import torch

from oracles import make_dataset

from colonformer.data import DatasetId


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_dataset(tmp_path):
    return make_dataset(tmp_path / "Kvasir", 4, (64, 64))


@pytest.fixture
def five_datasets(tmp_path):
    """Small stand-ins for the five benchmarks under one parent directory."""
    sizes = {DatasetId.KVASIR: 20, DatasetId.CLINICDB: 12, DatasetId.COLONDB: 6, DatasetId.CVC_T: 4, DatasetId.ETIS: 5}
    shapes = {DatasetId.KVASIR: (72, 80), DatasetId.CLINICDB: (48, 64), DatasetId.COLONDB: (50, 58),
              DatasetId.CVC_T: (40, 40), DatasetId.ETIS: (60, 50)}
    parent = tmp_path / "data"
    for i, (ds, n) in enumerate(sizes.items()):
        make_dataset(parent / ds.value, n, shapes[ds], seed=i, prefix=ds.value.lower().replace("-", "") + "_")
    return parent


# criterion number -> (title, passed); filled from tests marked ``acceptance``
ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    num, title = marker.args
    ok = ACCEPTANCE.get(num, (title, True))[1]
    ACCEPTANCE[num] = (title, ok and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num:2d}: {title}")
