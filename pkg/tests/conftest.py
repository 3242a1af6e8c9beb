"""Shared pytest plumbing for the acceptance gate: each criterion records
one PASS/FAIL line, replayed in the terminal summary where output capture
cannot hide it."""

import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def announce(request):
    """Record one `ACCEPTANCE <n> PASS|FAIL - detail` line per criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def _announce(criterion: int, ok: bool, detail: str, extra=()) -> None:
        line = f"ACCEPTANCE {criterion:2d} {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        lines.append(line)
        for row in extra:
            print(row)
            lines.append(f"    {row}")

    return _announce


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, None)
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
