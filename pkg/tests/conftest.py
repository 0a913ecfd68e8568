import pytest

from zsar_kit.problem import build_problem
from zsar_kit.synthbench import SynthSpec, generate


def synth_problem(k=5, **spec):
    base = dict(n_seen=5, n_unseen=3, videos_per_class=20, descriptions_per_class=6)
    base.update(spec)
    data = generate(SynthSpec(**base))
    return data, build_problem(data.videos, data.split, data.definitions, data.descriptions, k=k)


@pytest.fixture
def small_problem():
    return synth_problem()[1]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
