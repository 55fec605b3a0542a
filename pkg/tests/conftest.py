import sys

import numpy as np
import pytest

from morphoscale.demo import demo_campaigns
from morphoscale.schema import Answer, Campaign, Question, build_global_index


def make_question(qid, answers, children=None):
    children = children or {}
    return Question(qid, qid, tuple(Answer(a, a, children.get(a)) for a in answers))


@pytest.fixture
def campaigns():
    return demo_campaigns()


@pytest.fixture
def index(campaigns):
    return build_global_index(campaigns)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def chain_campaign():
    return Campaign(
        "chain",
        (
            make_question("root", ["a", "b"], {"a": "q2"}),
            make_question("q2", ["c", "d"], {"c": "q3"}),
            make_question("q3", ["e", "f"]),
        ),
        ("root",),
    )


@pytest.fixture
def diamond_campaign():
    return Campaign(
        "diamond",
        (
            make_question("root", ["left", "right"], {"left": "q2", "right": "q3"}),
            make_question("q4", ["x", "y"]),
            make_question("q2", ["a", "b"], {"a": "q4"}),
            make_question("q3", ["c", "d"], {"c": "q4"}),
        ),
        ("root",),
    )


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        terminalreporter.write_line(report[n])
