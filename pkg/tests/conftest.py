"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


class Verdicts:
    def record(self, key: str, ok: bool, detail: str) -> bool:
        _VERDICTS[key] = (bool(ok), detail)
        return bool(ok)


@pytest.fixture
def verdict():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: [int(p) if p.isdigit() else p for p in k.replace(".", " ").split()]):
        ok, detail = _VERDICTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
