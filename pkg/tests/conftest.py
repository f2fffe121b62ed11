import pytest


@pytest.fixture
def announce(capsys):
    """Print one visible line per acceptance criterion, even under output capture."""

    def _say(label: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")

    return _say

