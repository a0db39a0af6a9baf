from __future__ import annotations

import re

import pytest

from helpers import build_site

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")

_OUTCOME_LABELS = {"passed": "PASS", "failed": "FAIL", "error": "FAIL"}


@pytest.fixture()
def site_dir(tmp_path):
    return build_site(tmp_path / "site")


@pytest.fixture(scope="session")
def shared_site_dir(tmp_path_factory):
    return build_site(tmp_path_factory.mktemp("site"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    results: dict[int, tuple[str, str]] = {}
    for outcome, label in _OUTCOME_LABELS.items():
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION_RE.search(getattr(report, "nodeid", ""))
            if match and getattr(report, "when", "call") == "call":
                results[int(match.group(1))] = (match.group(2), label)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        name, label = results[number]
        terminalreporter.write_line(f"criterion {number} ({name}): {label}")
