"""Shared test fixtures."""

import copy
import json

import numpy as np
import pytest

from dooc.cost import QuadraticCost
from dooc.graph import example_digraph, laplacian
from dooc.models import parse_scenario, shipped_scenario_path

S_STAR = 2.0
EXAMPLE_R = np.array([2.0, 4.0, 3.0, 1.0, 1.0]) / 11.0


def shipped_raw() -> dict:
    """The shipped five-agent scenario as a raw dict."""
    return json.loads(shipped_scenario_path("paper_sec4").read_text())


# ── Scenarios ─────────────────────────────────────────────────

SINGLE_AGENT = {
    "name": "single_b",
    "graph": {"nodes": 1},
    "costs": [{"kind": "quadratic", "q": 1.0, "b": 1.0}],
    "coordinator": {"y_r0": [1.0]},
    "plants": [
        {
            "family": "B",
            "b": 1.0,
            "nominal": [0.0, 0.0, 0.0],
            "uncertainty": "zero",
            "amplitude": 0.0,
        }
    ],
    "observer": {"h": 10.0, "c": "binomial", "pole": 50.0},
    "controller": {"K": 50.0, "g": 2.0},
    "integration": {"dt": 1e-3, "t_final": 25.0, "record_stride": 100},
}

BALANCED_RING = {
    "name": "ring",
    "graph": {
        "nodes": 3,
        "edges": [{"from": 1, "to": 2}, {"from": 2, "to": 3}, {"from": 3, "to": 1}],
    },
    "costs": [{"q": 1.0, "b": 0.0}, {"q": 1.0, "b": 1.0}, {"q": 1.0, "b": 5.0}],
    "controller": {"mode": "coordinator-only"},
    "integration": {"dt": 0.01, "t_final": 1.0, "record_stride": 10},
}


def single_agent_raw() -> dict:
    return copy.deepcopy(SINGLE_AGENT)


# ── Fixtures ──────────────────────────────────────────────────


@pytest.fixture
def example_graph():
    return example_digraph()


@pytest.fixture
def example_lap(example_graph):
    return laplacian(example_graph)


@pytest.fixture
def example_costs():
    """c_i(s) = (s - i + 1)^2 / 4 for i = 1..5."""
    return [QuadraticCost(q=0.25, b=float(i)) for i in range(5)]


@pytest.fixture
def example_scenario():
    return parse_scenario(shipped_raw())


@pytest.fixture
def short_example_scenario():
    """The shipped scenario cut to a few hundred steps."""
    raw = shipped_raw()
    raw["integration"] = {"dt": 1e-4, "t_final": 0.03, "record_stride": 50}
    return parse_scenario(raw)


@pytest.fixture
def single_agent_scenario():
    return parse_scenario(single_agent_raw())


@pytest.fixture
def ring_scenario():
    return parse_scenario(copy.deepcopy(BALANCED_RING))
