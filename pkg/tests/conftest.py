"""Shared pytest plumbing: collects acceptance-criterion verdicts so the
final terminal summary lists one PASS/FAIL line per criterion."""

ACCEPTANCE_RESULTS: list[str] = []


def record_criterion(number: int, description: str, ok: bool,
                     detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {number:2d} [{status}] {description}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
