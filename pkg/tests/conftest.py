import sys

import pytest

from selgen.synth import SynthProfile, synth_generate


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(11, 12, SynthProfile(records_per_scenario=6, salient_count=3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
