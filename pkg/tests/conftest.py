import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(k: int, ok: bool, detail: str):
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
