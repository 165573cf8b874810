import contextlib

import pytest

# criterion number -> (title, passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion.

    Usage: ``with criterion(3, "constraint accuracy") as note: ...``; ``note``
    collects measured values for the summary line.
    """

    @contextlib.contextmanager
    def record(number, title):
        notes = []
        try:
            yield notes.append
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            ACCEPTANCE[number] = (title, False, "; ".join(notes + [reason]))
            raise
        ACCEPTANCE[number] = (title, True, "; ".join(notes))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
