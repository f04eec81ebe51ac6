import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "benchmark: long synthetic transfer benchmark (minutes)")
    config._acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record a one-line pass/fail verdict for an acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(label, ok, detail):
        if isinstance(label, int):
            label = f"criterion {label}"
        line = f"{label:<14}{'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
