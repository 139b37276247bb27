def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line verdict each acceptance test prints."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" and "test_acceptance" in rep.nodeid:
                lines += [l for l in rep.capstdout.splitlines() if l.startswith("criterion")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
