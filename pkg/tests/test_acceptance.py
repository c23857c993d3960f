"""Tests for the acceptance harness.

The full-horizon closed-loop criteria are marked ``slow``; run them with ``pytest -m slow``.
"""

import json

import numpy as np
import pytest

from dooc.acceptance import (
    AcceptanceReport,
    _fingerprint,
    coordinator_scenario,
    evaluate,
    gradient_fd_error,
    internal_model_reproduction,
    minimizer_oracle_error,
    plan,
    reproduce,
    transient_tracking_error,
)
from dooc.controller import ControlMode
from dooc.cost import LogisticQuadraticCost, QuadraticCost
from dooc.errors import AcceptanceError, DivergenceError
from dooc.models import parse_scenario
from dooc.sim import ClosedLoop, Trajectory, run

from .conftest import EXAMPLE_R, shipped_raw


@pytest.fixture(scope="module")
def coordinator_run():
    return run(coordinator_scenario(parse_scenario(shipped_raw())))


# ── Report ────────────────────────────────────────────────────


class TestAcceptanceReport:

    def test_table_and_failure(self):
        report = AcceptanceReport()
        report.add(2, "left eigenvector", True, "ok")
        report.add(1, "coordinator convergence", False, "slow")
        lines = report.table().splitlines()
        assert lines[1].startswith(" 1  coordinator convergence  FAIL")
        assert lines[2].startswith(" 2  left eigenvector")
        assert not report.passed
        with pytest.raises(AcceptanceError, match="1") as exc:
            report.raise_if_failed()
        assert exc.value.exit_code == 4

    def test_all_passed(self):
        report = AcceptanceReport()
        report.add(4, "minimizer oracle", True)
        report.raise_if_failed()


# ── Plan ──────────────────────────────────────────────────────


class TestPlan:

    def test_roles(self, example_scenario):
        runs = plan(example_scenario)
        assert runs["closed_loop"] is example_scenario
        assert runs["state_feedback"].controller.mode is ControlMode.STATE_FEEDBACK
        assert runs["half_dt"].integration.dt == 5e-5
        assert runs["half_dt"].integration.record_stride == 200
        assert runs["prefix"].integration.t_final == 5.0
        assert runs["h=25"].observer.h == 25.0

    def test_shipped_h_is_deduplicated(self, example_scenario):
        runs = plan(example_scenario)
        assert _fingerprint(runs["h=100"]) == _fingerprint(runs["closed_loop"])
        assert _fingerprint(runs["h=50"]) != _fingerprint(runs["closed_loop"])

    def test_coordinator_scenario(self, example_scenario):
        scn = coordinator_scenario(example_scenario)
        assert scn.controller.mode is ControlMode.COORDINATOR_ONLY
        assert scn.plants == []
        assert scn.integration.t_final == 200.0
        assert scn.coordinator == example_scenario.coordinator


# ── Oracles ───────────────────────────────────────────────────


class TestOracles:

    def test_gradient_fd(self, example_costs):
        assert max(gradient_fd_error(c, s) for c in example_costs for s in (-1.0, 0.5, 3.0)) <= 1e-6

    def test_minimizer_closed_form(self, example_costs):
        assert minimizer_oracle_error(example_costs) <= 1e-10

    def test_minimizer_non_quadratic(self):
        costs = [LogisticQuadraticCost(q=0.3, b=1.0), QuadraticCost(q=0.5, b=-2.0)]
        assert minimizer_oracle_error(costs) <= 1e-10

    @pytest.mark.parametrize("agent_index", [0, 2])
    def test_internal_model_reproduction(self, example_scenario, agent_index):
        loop = ClosedLoop.compile(example_scenario)
        err = internal_model_reproduction(loop.agents[agent_index], loop, horizon=5.0)
        assert err <= 1e-6


# ── Evaluation ────────────────────────────────────────────────


class TestEvaluate:

    def test_oracle_and_coordinator_criteria(self, example_scenario, coordinator_run):
        report = evaluate(example_scenario, {"coordinator": coordinator_run})
        by_id = {c.id: c for c in report.criteria}
        assert sorted(by_id) == list(range(1, 11))
        for cid in range(1, 7):
            assert by_id[cid].passed, by_id[cid].detail
        for cid in range(7, 11):
            assert not by_id[cid].passed
        assert "run missing" in by_id[7].detail

    def test_coordinator_run_matches_oracles(self, coordinator_run):
        np.testing.assert_allclose(coordinator_run.xi_diag[-1], EXAMPLE_R, atol=1e-6)
        assert np.max(np.abs(coordinator_run.y_r[-1] - 2.0)) <= 1e-3

    def test_failed_run_is_reported(self, example_scenario, coordinator_run):
        results = {
            "coordinator": coordinator_run,
            "closed_loop": DivergenceError("Non-finite state", time=1.0, block="agent2.x"),
        }
        report = evaluate(example_scenario, results)
        closed = next(c for c in report.criteria if c.id == 7)
        assert not closed.passed
        assert "block=agent2.x" in closed.detail


def _tracking_run(amplitude, n=5):
    t = np.linspace(0.0, 10.0, 101)
    y = np.outer(amplitude * np.exp(-t), np.ones(n))
    zeros = np.zeros((t.size, n))
    return Trajectory(
        t=t,
        y=y,
        y_r=zeros,
        u=zeros,
        theta_tilde=zeros,
        eta_ff=zeros,
        u_star=zeros,
        zeta=zeros,
        xi=np.tile(np.eye(n), (t.size, 1, 1)),
        v=np.zeros((t.size, 2)),
    )


class TestObserverAdequacy:

    def test_window_excludes_start_and_tail(self):
        traj = _tracking_run(1.0)
        traj.y[2] = 50.0
        traj.y[80] = 50.0
        assert transient_tracking_error(traj) == pytest.approx(np.exp(-0.5))

    def test_short_horizon_uses_last_record(self):
        traj = _tracking_run(1.0).prefix(0.3)
        assert transient_tracking_error(traj) == pytest.approx(np.exp(-0.3))

    @pytest.mark.parametrize(
        "amplitudes,passed",
        [
            ((3.0, 2.0, 1.0, 0.5), True),
            ((3.0, 2.0, 1.0, 1.0), True),
            ((2.0, 3.0, 1.0, 0.5), False),
            ((3.0, 2.0, 1.0, 1.5), False),
        ],
    )
    def test_criterion(self, example_scenario, amplitudes, passed):
        roles = ("h=25", "h=50", "h=100", "state_feedback")
        results = {role: _tracking_run(a) for role, a in zip(roles, amplitudes)}
        report = evaluate(example_scenario, results)
        criterion = next(c for c in report.criteria if c.id == 9)
        assert criterion.passed is passed
        assert criterion.detail.startswith("sup|y - y_r| on [0.5, 5] s")


# ── Full reproduction ─────────────────────────────────────────


@pytest.mark.slow
class TestReproduce:

    def test_every_criterion_passes(self, example_scenario, tmp_path):
        bundle = reproduce(example_scenario, tmp_path, jobs=4)
        failed = [c for c in bundle.report.criteria if not c.passed]
        assert not failed, bundle.report.table()
        payload = json.loads((tmp_path / "acceptance.json").read_text())
        assert payload["passed"] is True
        assert (tmp_path / "tracking.csv").exists()
        assert (tmp_path / "closed_loop" / "trajectory.csv").exists()
        assert (tmp_path / "coordinator" / "metadata.json").exists()
