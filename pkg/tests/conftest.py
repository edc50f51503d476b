import numpy as np
import pytest

CRITERIA = {
    1: "hypercube cosine-distance bound",
    2: "random nearest-neighbor similarity",
    3: "exact search oracle equivalence",
    4: "beam degeneracy and monotonicity",
    5: "manual gradient correctness",
    6: "target collapse vs frozen targets",
    7: "rare-token mechanism",
    8: "combined embeddings",
    9: "vMF normalizer",
    10: "metric sanity",
}

_results: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        measured = [v for k, v in item.user_properties if k == "measured"]
        _results.setdefault(mark.args[0], []).append((item.name, rep.passed, measured))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(p for _, p, _ in runs)
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERIA.get(n, '')}")
        for name, passed, measured in runs:
            for m in measured:
                tr.write_line(f"    {name}: {m}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
