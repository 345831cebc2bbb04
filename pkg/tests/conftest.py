import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(acceptance_log.RESULTS, key=lambda k: int(k[1:])):
        status, text = acceptance_log.RESULTS[key]
        tr.write_line(f"{status:<4} {key}: {text}")
    for table in acceptance_log.TABLES:
        tr.write_line("")
        for line in table.splitlines():
            tr.write_line(line)
