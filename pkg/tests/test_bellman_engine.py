import numpy as np
import pytest

from bellman_resnet.bellman_engine import (BellmanOperator, DomainMismatch, NotConverged,
                                           RegularityBudget, ViolationReport, bellman_apply,
                                           bellman_at_points, contraction_ratio,
                                           estimate_regularity_constants, get_operator,
                                           random_pair_family, regularity_budget,
                                           residual_apply, value_iterate,
                                           verify_contraction, verify_uniform_regularity,
                                           write_trace_csv)
from bellman_resnet.grid_space import GridDomain, decode, encode, lipschitz_bounds
from bellman_resnet.mdp_model import discount_factor, make_spec, uniform_q_bound
from bellman_resnet.trajectory import SimConfig

from conftest import bump_function

GAMMA = 0.9


def closed_form(k, s, a):
    """Value-iteration iterates of the walk on [0, 1] for k <= 2, as arrays over nodes."""
    q1 = -(s - 0.5) ** 2
    if k == 0:
        return np.zeros_like(s)
    if k == 1:
        return q1
    return q1 - GAMMA * (np.clip(s + 0.1 * a, 0.0, 1.0) - 0.5) ** 2


def brute_force_bellman(spec, q):
    """Nodewise loop over the definition, independent of the vectorised kernel."""
    g = q.domain
    out = np.empty(g.size)
    t, s, a, _ = g.node_points()
    for j in range(g.size):
        s_next = spec.transition(s[j:j + 1], a[j:j + 1])
        best = max(q.at(s_next, i)[0] for i in range(g.n_actions))
        out[j] = spec.reward(t[j:j + 1], s[j:j + 1], a[j:j + 1])[0] + GAMMA * best
    return out


@pytest.fixture(scope="module")
def zero_q(walk_grid):
    return decode(np.zeros(walk_grid.size), walk_grid)


@pytest.fixture(scope="module")
def walk_star(walk_spec, zero_q):
    return value_iterate(walk_spec, zero_q, 1000, 1e-15, require_convergence=True)


class TestApply:
    def test_first_iterate(self, walk_spec, walk_grid, zero_q):
        v = bellman_apply(walk_spec, zero_q).values.reshape(11, 2)
        s = walk_grid.states[0]
        assert np.array_equal(v[:, 0], v[:, 1])
        assert np.max(np.abs(v[:, 0] + (s - 0.5) ** 2)) <= 1e-15

    def test_second_iterate_at_midpoint(self, walk_spec, zero_q):
        q2 = bellman_apply(walk_spec, bellman_apply(walk_spec, zero_q))
        assert q2.values.reshape(11, 2)[5, 0] == pytest.approx(-0.009, abs=1e-15)

    def test_zero_problem(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        assert bellman_apply(spec, decode(np.zeros(g.size), g)).sup_norm() == 0.0

    def test_matches_brute_force(self, walk_spec, walk_grid):
        for seed in range(5):
            q = bump_function(walk_grid, seed, amplitude=0.475)
            fast = bellman_apply(walk_spec, q).values
            assert np.max(np.abs(fast - brute_force_bellman(walk_spec, q))) <= 1e-15

    def test_batched_matches_single(self, ou_spec, ou_grid):
        cfg = SimConfig(8, 100, 0)
        op = get_operator(ou_spec, ou_grid, cfg)
        rows = random_pair_family(ou_spec, ou_grid, 3, 0)
        batch = op.apply_values(rows)
        for r, b in zip(rows, batch):
            assert np.allclose(op.apply(decode(r, ou_grid)).values, b, atol=1e-13)

    def test_operator_cached(self, ou_spec, ou_grid):
        cfg = SimConfig(8, 100, 0)
        assert get_operator(ou_spec, ou_grid, cfg) is get_operator(ou_spec, ou_grid, cfg)
        assert get_operator(ou_spec, ou_grid, cfg) is not get_operator(ou_spec, ou_grid,
                                                                      SimConfig(8, 100, 1))

    def test_domain_mismatch(self, walk_spec, walk_grid):
        op = BellmanOperator(walk_spec, walk_grid)
        other = GridDomain.for_spec(walk_spec, 21)
        with pytest.raises(DomainMismatch):
            op.apply(decode(np.zeros(other.size), other))

    def test_at_points_agrees_on_nodes(self, ou_spec, ou_grid):
        cfg = SimConfig(8, 100, 0)
        q = bump_function(ou_grid, 4)
        t, s, a, _ = ou_grid.node_points()
        pts = bellman_at_points(ou_spec, q, t[:25], s[:25], a[:25], cfg)
        assert np.allclose(pts, bellman_apply(ou_spec, q, cfg).values[:25], atol=1e-13)


class TestResidual:
    def test_at_zero_is_first_iterate(self, walk_spec, zero_q):
        r = residual_apply(walk_spec, zero_q)
        assert np.array_equal(r.values, bellman_apply(walk_spec, zero_q).values)

    def test_at_fixed_point(self, walk_spec, walk_star):
        assert residual_apply(walk_spec, walk_star.q_star).sup_norm() <= 1e-13

    def test_zero_problem(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        assert residual_apply(spec, decode(np.zeros(g.size), g)).sup_norm() == 0.0


class TestValueIteration:
    def test_zero_problem_converges_immediately(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        tr = value_iterate(spec, decode(np.zeros(g.size), g), 10, 1e-12)
        assert tr.converged and tr.n_steps == 1 and tr.q_star.sup_norm() == 0.0

    def test_walk_closed_forms(self, walk_spec, walk_grid, zero_q):
        tr = value_iterate(walk_spec, zero_q, 2, 1e-15)
        _, s, a, _ = walk_grid.node_points()
        for k in range(3):
            assert np.max(np.abs(tr.iterates[k].values - closed_form(k, s[:, 0], a[:, 0]))) <= 1e-12
        assert tr.sup_norms == pytest.approx([0.0, 0.25, 0.475], abs=1e-12)

    def test_require_convergence(self, walk_spec, zero_q):
        with pytest.raises(NotConverged) as exc:
            value_iterate(walk_spec, zero_q, 3, 1e-12, require_convergence=True)
        assert exc.value.trace.n_steps == 3
        assert not value_iterate(walk_spec, zero_q, 3, 1e-12).converged

    def test_fixed_point_bound_holds(self, walk_spec, zero_q, walk_star):
        tr = value_iterate(walk_spec, zero_q, 40, 1e-15)
        err = np.max(np.abs(tr.q_star.values - walk_star.q_star.values))
        assert err <= tr.fixed_point_bound + 1e-15

    def test_sde_ratios_below_beta(self, ou_spec, ou_grid):
        cfg = SimConfig(8, 200, 0)
        tr = value_iterate(ou_spec, decode(np.zeros(ou_grid.size), ou_grid), 8, 1e-12, cfg)
        # a fixed kernel averages paths with weights <= beta, so no MC slack is needed
        assert max(tr.ratios) <= discount_factor(ou_spec) * (1 + 1e-12)

    def test_arguments_validated(self, walk_spec, zero_q):
        with pytest.raises(ValueError):
            value_iterate(walk_spec, zero_q, 0, 1e-12)
        with pytest.raises(ValueError):
            value_iterate(walk_spec, zero_q, 2, 0.0)

    def test_trace_csv(self, tmp_path, walk_spec, zero_q):
        tr = value_iterate(walk_spec, zero_q, 2, 1e-15)
        lines = write_trace_csv(tr, tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0].split(",")[:2] == ["k", "sup_distance"]
        assert len(lines) == 4 and lines[1].split(",")[1] == "nan"


class TestContraction:
    def test_constant_shift(self, walk_spec, walk_grid):
        q = bump_function(walk_grid, 0)
        assert contraction_ratio(walk_spec, q, q + 0.3) == pytest.approx(GAMMA, abs=1e-12)

    def test_identical_pair(self, walk_spec, walk_grid):
        q = bump_function(walk_grid, 0)
        assert contraction_ratio(walk_spec, q, q) == 0.0

    def test_fifty_pairs(self, walk_spec, walk_grid):
        rep = verify_contraction(walk_spec, walk_grid, 50)
        assert rep.passed and rep.max_ratio <= 0.9 + 1e-9 and len(rep.ratios) == 50

    def test_pair_caps(self, walk_spec, walk_grid):
        fam = random_pair_family(walk_spec, walk_grid, 40, 1, 0.475, 1.9)
        assert np.abs(fam).max() <= 0.475 + 1e-12
        assert np.all(lipschitz_bounds(walk_grid, fam)[1] <= 1.9 + 1e-9)

    def test_report_dict(self, walk_spec, walk_grid):
        d = verify_contraction(walk_spec, walk_grid, 3).to_dict()
        assert d["passed"] and d["beta"] == GAMMA


class TestRegularity:
    def test_budget_examples(self):
        assert regularity_budget(None, 1.0, 0.5, n_max=3).L_unif == pytest.approx(1.75)
        assert regularity_budget(None, 0.0, 0.7, n_max=5).L_unif == 0.0
        assert regularity_budget(None, 2.0, 1.0, L0=1.0, n_max=4).L_unif == 9.0

    def test_budget_default_horizon(self, ou_spec):
        assert regularity_budget(ou_spec, 1.0, 0.5).N_max == 10

    def test_budget_rejects_negative(self):
        with pytest.raises(ValueError):
            regularity_budget(None, -1.0, 0.5, n_max=2)

    def test_walk_trace(self, walk_spec, zero_q):
        tr = value_iterate(walk_spec, zero_q, 2, 1e-15)
        rep = verify_uniform_regularity(tr, 1 + GAMMA, uniform_q_bound(walk_spec))
        assert rep.ok
        assert rep.lipschitz[0] == 0.0 and rep.lipschitz[1] <= 1.0
        assert rep.lipschitz[2] <= 1 + GAMMA

    def test_zero_problem(self):
        spec = make_spec("zero")
        g = GridDomain.for_spec(spec, 11)
        tr = value_iterate(spec, decode(np.zeros(g.size), g), 3, 1e-12)
        assert verify_uniform_regularity(tr, 0.0, 0.0).ok

    def test_scaled_iterate_flagged(self, walk_spec, zero_q):
        tr = value_iterate(walk_spec, zero_q, 2, 1e-15)
        m_q = uniform_q_bound(walk_spec)
        bad = tr.iterates[2] * (10 * m_q / tr.iterates[2].sup_norm())
        tr.iterates[2] = bad
        tr.sup_norms[2] = bad.sup_norm()
        tr.lipschitz[2] = lipschitz_bounds(bad.domain, bad.values)[0]
        with pytest.raises(ViolationReport) as exc:
            verify_uniform_regularity(tr, 1 + GAMMA, m_q, strict=True)
        flagged = {v[0] for v in exc.value.report.violations}
        assert flagged == {2}
        assert {v[1] for v in exc.value.report.violations} == {"sup_norm", "lipschitz"}

    def test_budget_object_accepted(self, walk_spec, zero_q):
        tr = value_iterate(walk_spec, zero_q, 2, 1e-15)
        budget = regularity_budget(None, 1.0, GAMMA, n_max=2)
        assert isinstance(budget, RegularityBudget)
        assert verify_uniform_regularity(tr, budget, 0.475).ok

    def test_empirical_constants(self, walk_spec, walk_grid):
        c = estimate_regularity_constants(walk_spec, walk_grid)
        assert c.K_A == pytest.approx(0.9, abs=1e-12)
        # the walk moves states by a fixed step, so Lip(BQ) grows by at most gamma Lip(Q)
        assert 0.0 <= c.K_B <= GAMMA + 1e-9
        assert c.K_B_regression <= c.K_B + 1e-12
