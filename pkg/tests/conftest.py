import numpy as np
import pytest

from selfmae import tensor as T


def param64(rng, *shape, scale=1.0):
    return T.parameter(rng.normal(size=shape) * scale, dtype=np.float64)


def const64(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    outcome = "PASS" if call.excinfo is None else "FAIL"
    measured = "; ".join(v for k, v in item.user_properties if k == "measured")
    _CRITERIA.setdefault(mark.args[0], []).append((outcome, item.name, measured))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(o == "PASS" for o, _, _ in results)
        failed = [name for o, name, _ in results if o != "PASS"]
        detail = f" ({', '.join(failed)})" if failed else ""
        measured = "; ".join(m for _, _, m in results if m)
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}{detail}"
        terminalreporter.write_line(f"{line}: {measured}" if measured else line)
