import contextlib
import time

import pytest


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class Detail:
    """Mutable note a criterion body fills in for its summary line."""

    def __init__(self):
        self.text = ""


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as d:`` records one PASS/FAIL line for criterion n."""

    @contextlib.contextmanager
    def run(n, title):
        d = Detail()
        t0 = time.perf_counter()
        ok = False
        try:
            yield d
            ok = True
        except AssertionError as e:
            first = str(e).strip().splitlines()[0] if str(e).strip() else "assertion failed"
            d.text = f"{d.text}; {first}" if d.text else first
            raise
        finally:
            line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} [{time.perf_counter() - t0:.1f} s] {d.text}".rstrip()
            print(line)
            request.config.acceptance_lines.append(line)

    return run
