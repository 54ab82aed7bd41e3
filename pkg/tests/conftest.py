import contextlib

ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for one acceptance criterion, re-raising any failure."""
    try:
        yield
    except BaseException:
        ACCEPTANCE[number] = (title, "FAIL")
        print(f"acceptance {number:2d} FAIL  {title}")
        raise
    ACCEPTANCE[number] = (title, "PASS")
    print(f"acceptance {number:2d} PASS  {title}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, verdict = ACCEPTANCE[number]
        terminalreporter.write_line(f"{number:2d} {verdict}  {title}")
