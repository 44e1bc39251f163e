import pytest

CRITERIA = {
    1: "loss oracles (bce, arcface, m=0 identity)",
    2: "gradient check vs central differences",
    3: "channel / speaker permutation symmetries",
    4: "DER vs brute-force frame counting",
    5: "fusion, blocking and binarization oracles",
    6: "overfit run: pipeline DER < 5%, frame accuracy >= 99%",
    7: "trend reproduction on held-out synthetic sets",
    8: "determinism of infer and simulate",
}

_outcomes: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")
    config.addinivalue_line("markers", "slow: needs the trained acceptance model")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            continue
        ok = all(outcome == "passed" for _, outcome in results)
        failed = [name for name, outcome in results if outcome != "passed"]
        detail = "" if ok else "  failing: " + ", ".join(failed)
        terminalreporter.write_line(f"criterion {n} [{CRITERIA[n]}]: {'PASS' if ok else 'FAIL'} "
                                    f"({len(results)} checks){detail}")


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    # keep relative CLI output directories out of the working tree
    monkeypatch.setenv("MCS2SND_OUTPUT", str(tmp_path / "out"))
