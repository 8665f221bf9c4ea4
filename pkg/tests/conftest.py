"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

VERDICTS: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> None:
    VERDICTS.setdefault(criterion, []).append((part, ok, detail))
    label = f"criterion {criterion}{part}"
    print(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(VERDICTS):
        parts = VERDICTS[criterion]
        ok = all(p[1] for p in parts)
        if len(parts) == 1:
            detail = parts[0][2]
        else:
            detail = "; ".join(f"({name}) {'PASS' if good else 'FAIL'} {text}" for name, good, text in parts)
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
