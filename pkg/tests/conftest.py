import _helpers


def pytest_terminal_summary(terminalreporter):
    if not _helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda c: (int("".join(ch for ch in c if ch.isdigit())), c)
    for criterion in sorted(_helpers.ACCEPTANCE, key=key):
        ok, detail = _helpers.ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}")
