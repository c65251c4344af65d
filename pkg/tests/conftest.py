import os
import warnings

import pytest

from stokesdarcy.assembly import CompatibilityWarning


def pytest_configure(config):
    warnings.simplefilter("ignore", CompatibilityWarning)


@pytest.fixture(autouse=True)
def _quiet_compatibility():
    # quadrature of the smooth manufactured data is not exactly balanced
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CompatibilityWarning)
        yield


def pytest_report_header(config):
    return f"STOKESDARCY_THREADS={os.environ.get('STOKESDARCY_THREADS', 'unset')}"


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str):
        ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0])):
        parts = ACCEPTANCE[crit]
        ok = all(p[0] for p in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {detail}")
