import sys

import hypothesis
import numpy as np
import pytest

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    ran = {item.nodeid for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])}
    if not any("test_acceptance" in n for n in ran):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.format_results():
        terminalreporter.write_line(line)
    missing = sorted(set(range(1, 9)) - set(mod.RESULTS))
    for n in missing:
        terminalreporter.write_line(f"criterion {n}: FAIL (not run or raised before reporting)")
