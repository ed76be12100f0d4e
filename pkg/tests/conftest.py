from __future__ import annotations

import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criteria(request):
    """Collects ``{criterion: [(part, ok, detail), ...]}`` for the closing summary."""
    return request.config.stash.setdefault(_RESULTS, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        parts = results[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{part} {'ok' if ok else 'FAILED'}: {text}" for part, ok, text in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
