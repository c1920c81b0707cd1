import numpy as np
import pytest

from dkit.synthdata import DatasetSpec, make_dataset


@pytest.fixture(scope="session")
def small_spec() -> DatasetSpec:
    return DatasetSpec(n_speakers=4, n_emotions=3, samples_per_cell=4, neutral_only_speakers=[3], seed=5)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return make_dataset(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    entry = _CRITERIA.setdefault(n, [])
    if report.when == "call" or (report.when == "setup" and not report.passed):
        notes = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        entry.append((item.name, report.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = bool(results) and all(passed for _, passed, _ in results)
        notes = " | ".join(f"{name}: {note}" for name, _, note in results if note)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line}  ({notes})" if notes else line)
