import pytest

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_record():
    """Callable (criterion, passed, detail) that feeds the end-of-run summary."""

    def record(criterion, passed, detail=""):
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
