import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool | None, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records a line for the acceptance summary."""

    def record(n: int, passed: bool | None, detail: str) -> None:
        ACCEPTANCE[n] = (passed, detail)
        print(f"criterion {n}: {'SKIP' if passed is None else 'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
