import pytest

# criterion id -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance_record():
    def record(key: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[key] = (passed, detail)
        print(f"{'PASS' if passed else 'FAIL'} {key}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {key}: {detail}")
