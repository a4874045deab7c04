import math

import numpy as np
import pytest

from bellman_resnet.bellman_engine import value_iterate
from bellman_resnet.grid_space import GridDomain, decode
from bellman_resnet.mdp_model import make_spec
from bellman_resnet.operator_net import GridMismatch, OperatorBlock
from bellman_resnet.resnet_stack import (BlockMissing, NetworkBlock, OracleBlock, PerturbedBlock,
                                         lipschitz_cap, plan_stack, resolution_floor, run_stack,
                                         stack_bound, verify_theorem, write_stack_csv)

EPS = 0.1


@pytest.fixture(scope="module")
def walk(walk_spec, walk_grid):
    """Plan, reference iterates and fixed point for the walk at epsilon 0.1."""
    plan = plan_stack(walk_spec, EPS)
    q0 = decode(np.zeros(walk_grid.size), walk_grid)
    ref = value_iterate(walk_spec, q0, plan.L, 1e-300)
    star = value_iterate(walk_spec, q0, 10_000, 1e-15).q_star
    return plan, q0, ref, star


class TestPlan:
    def test_single_layer_when_target_loose(self, walk_spec):
        assert plan_stack(walk_spec, 2 * stack_bound(walk_spec)).L == 1

    def test_explicit_bound(self, walk_spec):
        p = plan_stack(walk_spec, EPS, M_Q=0.475)
        assert p.L == 23 and p.epsilon_1 == pytest.approx(0.005)

    def test_continuous(self):
        spec = make_spec("ou_1d", {"discount_lambda": 1.0, "hold_delta": 0.1})
        p = plan_stack(spec, 0.2, M_Q=1.0)
        assert p.L == 25 and p.epsilon_1 == pytest.approx(0.2 * (1 - math.exp(-0.1)) / 2)
        assert p.epsilon_1 == pytest.approx(0.009516, abs=1e-6)

    def test_default_uses_infinite_stage_bound(self, walk_spec):
        p = plan_stack(walk_spec, EPS)
        assert p.M_Q == pytest.approx(2.5) and p.L == 39

    def test_envelope(self, walk_spec):
        p = plan_stack(walk_spec, EPS)
        assert p.envelope(0) == 0.0
        assert p.envelope(1) == pytest.approx(p.epsilon_1)
        assert p.envelope(10_000) == pytest.approx(EPS / 2)

    def test_rejects_bad_epsilon(self, walk_spec):
        with pytest.raises(ValueError):
            plan_stack(walk_spec, 0.0)

    def test_lipschitz_cap_recurrence(self):
        A, B = 2 * 0.5 + 1.0, 2 * 0.25 + 1.0
        caps = [0.0]
        for _ in range(4):
            caps.append(A + B * caps[-1])
        assert lipschitz_cap(0.5, 0.25, 1.0, 5) == pytest.approx(caps[4])
        assert lipschitz_cap(0.5, 0.0, 0.0, 4) == pytest.approx(3.0)
        assert lipschitz_cap(1.0, 1.0, 0.0, 1) == 0.0


class TestRunStack:
    def test_oracle_blocks_are_exact(self, walk_spec, walk):
        plan, q0, ref, star = walk
        tr = run_stack(plan, q0, ref, star, walk_spec, OracleBlock(walk_spec))
        assert all(e == 0.0 for e in tr.errors)
        assert tr.final_error <= plan.beta ** plan.L * plan.M_Q

    @pytest.mark.parametrize("c", [0.01, 0.001])
    def test_constant_error_closed_form(self, walk_spec, walk, c):
        plan, q0, ref, star = walk
        tr = run_stack(plan, q0, ref, star, walk_spec, PerturbedBlock(walk_spec, c))
        b = plan.beta
        for l, e in enumerate(tr.errors):
            assert abs(e - c * (1 - b ** l) / (1 - b)) <= 1e-12
        assert all(abs(d - c) <= 1e-15 for d in tr.delta_norms)

    def test_field_error_bounded(self, walk_spec, walk_grid, walk):
        plan, q0, ref, star = walk
        field = np.random.default_rng(0).standard_normal(walk_grid.size)
        tr = run_stack(plan, q0, ref, star, walk_spec,
                       PerturbedBlock(walk_spec, 0.01, field=field))
        assert tr.errors[-1] <= 0.01 * (1 - plan.beta ** plan.L) / (1 - plan.beta) + 1e-12

    def test_block_missing(self, walk_spec, walk):
        plan, q0, ref, star = walk
        with pytest.raises(BlockMissing):
            run_stack(plan, q0, ref, star, walk_spec, [OracleBlock(walk_spec)] * 2)

    def test_grid_mismatch(self, walk_spec, walk):
        plan, q0, ref, star = walk
        other = GridDomain.for_spec(walk_spec, 21)
        with pytest.raises(GridMismatch):
            run_stack(plan, q0, ref, decode(np.zeros(other.size), other), walk_spec,
                      OracleBlock(walk_spec))

    def test_trained_block(self, walk_spec, walk, trained_walk_block):
        plan, q0, ref, star = walk
        blk = trained_walk_block["block"]
        assert blk.metadata["test_eps"] <= plan.epsilon_1
        tr = run_stack(plan, q0, ref, star, walk_spec, NetworkBlock(blk))
        assert tr.errors[-1] <= EPS / 2
        assert tr.final_error < EPS

    def test_csv(self, tmp_path, walk_spec, walk):
        plan, q0, ref, star = walk
        tr = run_stack(plan, q0, ref, star, walk_spec, OracleBlock(walk_spec))
        lines = write_stack_csv(tr, tmp_path / "s.csv").read_text().splitlines()
        assert len(lines) == plan.L + 2
        assert lines[0].split(",")[:2] == ["l", "e_l"]


class TestEndToEnd:
    def test_zero_problem_oracle(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        rep = verify_theorem(spec, EPS, g, oracle_blocks=True)
        assert rep.passed and rep.plan.L == 1 and rep.trace.final_error == 0.0

    def test_zero_problem_zero_block(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        blk = OperatorBlock.for_grid(g, 1.0, hidden=[8]).zeroed()
        rep = verify_theorem(spec, EPS, g, block=blk)
        assert rep.passed
        assert all(x == 0.0 for x in rep.trace.sup_norms)

    def test_oracle_walk(self, walk_spec, walk_grid):
        rep = verify_theorem(walk_spec, EPS, walk_grid, oracle_blocks=True)
        assert rep.passed
        assert rep.trace.errors == [0.0] * (rep.plan.L + 1)
        assert rep.checks["aux_recurrence"]["passed"]

    def test_injected_error_fails_cleanly(self, walk_spec, walk_grid):
        e1 = plan_stack(walk_spec, EPS).epsilon_1
        rep = verify_theorem(walk_spec, EPS, walk_grid, injected_error=10 * e1)
        assert rep.status == "fail"
        assert not rep.checks["i_per_layer_operator_error"]["passed"]
        assert not rep.checks["ii_error_envelope"]["passed"]
        assert not rep.checks["iii_final_error"]["passed"]
        assert rep.to_dict()["status"] == "fail"

    def test_trained_block_passes(self, walk_spec, walk_grid, trained_walk_block):
        rep = verify_theorem(walk_spec, EPS, walk_grid,
                             block=trained_walk_block["block"])
        assert rep.passed, rep.checks
        assert rep.trace.errors[-1] <= EPS / 2
        assert rep.lfstar <= walk_grid.size * rep.block_metrics["bound"] / walk_grid.h_min

    def test_infeasible_resolution(self, walk_spec, walk_grid, walk):
        star = walk[3]
        floor = resolution_floor(walk_spec, star)
        assert 0.001 < floor < 0.01
        rep = verify_theorem(walk_spec, 0.001, walk_grid, oracle_blocks=True)
        assert rep.status == "infeasible-as-configured" and rep.trace is None
        assert rep.resolution_floor == pytest.approx(floor)
