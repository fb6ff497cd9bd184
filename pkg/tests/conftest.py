import pytest

ACCEPTANCE = []


def record(number: int, name: str, ok: bool, detail: str, seconds: float):
    line = f"AC{number:<2d} {'PASS' if ok else 'FAIL'}  {name}  ({seconds:.1f} s)  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
