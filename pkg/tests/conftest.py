import numpy as np
import pytest

from sysrisk.measures import AverageValueAtRisk, Expectation, MeanUpperSemiDeviation, ProbabilityVector
from sysrisk.model import Polytope, TwoStageSystemProblem
from sysrisk.systemic import ScalarizationWeights, SystemicMeasureSpec


def toy_problem() -> TwoStageSystemProblem:
    """Two agents, two scenarios, one systemic variable; every number is written out."""
    box = Polytope.box
    return TwoStageSystemProblem(
        prob=ProbabilityVector([0.5, 0.5]),
        risk=SystemicMeasureSpec(
            MeanUpperSemiDeviation(0.5),
            (Expectation(), AverageValueAtRisk(0.5)),
            ScalarizationWeights([0.5, 0.5]),
        ),
        cost=np.array([[1.0], [2.0]]),
        X=[box([0.0], [3.0]), box([0.0], [3.0])],
        A=np.array([[[1.0]], [[1.0]]]),
        b=np.array([2.0]),
        q=np.array([[[1.0], [0.5]], [[2.0], [1.0]]]),
        T=np.full((2, 2, 1, 1), -1.0),
        h=np.array([[[1.0], [3.0]], [[2.0], [0.5]]]),
        Y=[[box([0.0], [5.0]) for _ in range(2)] for _ in range(2)],
        W=np.array([
            [[[[1.0]], [[0.3]]], [[[0.3]], [[1.0]]]],
            [[[[1.0]], [[0.3]]], [[[0.3]], [[1.0]]]],
        ]),
        B=np.array([[[-1.0]], [[-1.0]]]),
        u=np.array([[1.0], [1.5]]),
        Z=[box([0.0], [2.0]), box([0.0], [2.0])],
    )


@pytest.fixture
def toy():
    return toy_problem()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in list(sys.modules.items())
                if name.endswith("test_acceptance") and hasattr(m, "ACCEPTANCE_RESULTS")), None)
    if mod is None or not mod.ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.ACCEPTANCE_RESULTS):
        passed, detail = mod.ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(mod.format_result(k, passed, detail))
