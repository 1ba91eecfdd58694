import pytest

_RESULTS: list[tuple[str, bool, str]] = []


class Criterion:
    """Records one acceptance criterion's verdict for the terminal summary."""

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")
        _RESULTS.append((self.name, ok, self.detail))
        print("\n" + line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
