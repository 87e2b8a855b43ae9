from __future__ import annotations

import time

import pytest
from hypothesis import HealthCheck, settings

from cmcloop import monodromy as mono
from cmcloop.graph import WeightedGraph

settings.register_profile(
    "seeded",
    max_examples=200,
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("seeded")


def graph_from(vertices, edges=(), rays=()) -> WeightedGraph:
    return WeightedGraph.from_dict(
        {
            "vertices": [{"id": i, "x": x, "y": y} for i, x, y in vertices],
            "edges": [{"a": a, "b": b, "weight": w} for a, b, w in edges],
            "rays": [{"vertex": j, "angle_deg": a, "weight": w} for j, a, w in rays],
        }
    )


@pytest.fixture
def chain() -> WeightedGraph:
    """Two vertices at distance 2, each with one outward unit ray."""
    return graph_from([(1, 0.0, 0.0), (2, 2.0, 0.0)], [(1, 2, 1.0)], [(1, 180.0, 1.0), (2, 0.0, 1.0)])


@pytest.fixture
def two_rays() -> WeightedGraph:
    return graph_from([(1, 0.0, 0.0)], rays=[(1, 0.0, 1.0), (1, 180.0, 1.0)])


@pytest.fixture
def tripod() -> WeightedGraph:
    return graph_from([(1, 0.0, 0.0)], rays=[(1, 0.0, 1.0), (1, 120.0, 1.0), (1, 240.0, 1.0)])


CHAIN_TIMES = (0.04, 0.02, 0.01, 0.005)


def _timed_solve(g, t, n=12):
    start = time.perf_counter()
    result = mono.newton_solve(g, t, mono.SolveOptions(n=n))
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def two_ray_solution():
    """Single vertex with two opposite unit rays, solved at t = 0.05; returns ``(result, seconds)``."""
    return _timed_solve(graph_from([(1, 0.0, 0.0)], rays=[(1, 0.0, 1.0), (1, 180.0, 1.0)]), 0.05)


@pytest.fixture(scope="session")
def chain_solutions():
    """Solves of the two-vertex chain at each of ``CHAIN_TIMES``: ``{t: (result, seconds)}``."""
    g = graph_from([(1, 0.0, 0.0), (2, 2.0, 0.0)], [(1, 2, 1.0)], [(1, 180.0, 1.0), (2, 0.0, 1.0)])
    return {t: _timed_solve(g, t) for t in CHAIN_TIMES}


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
