import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import RegularGridInterpolator

from bellman_resnet.grid_space import (DomainMismatch, GridDomain, GridError, GridFunction,
                                       LengthMismatch, NonFiniteValue, decode, encode,
                                       estimate_lipschitz, interpolate, lipschitz_bounds,
                                       load_grid_function, random_bump_values,
                                       save_grid_function, sup_distance)
from bellman_resnet.mdp_model import make_spec


def unit_grid(n):
    return GridDomain([np.linspace(0.0, 1.0, n)])


def plane_grid(n, m=None):
    return GridDomain([np.linspace(0.0, 1.0, n), np.linspace(-1.0, 1.0, m or n)])


def s_only(fn):
    return lambda t, s, a: fn(s[:, 0])


class TestDomain:
    def test_walk_shape(self, walk_grid):
        assert walk_grid.shape == (11, 2)
        assert walk_grid.size == 22
        assert walk_grid.axis_names == ("s0",)
        assert walk_grid.h_min == pytest.approx(0.1)

    def test_ou_grid_has_time_and_action_axes(self, ou_grid, ou_spec):
        assert ou_grid.time is not None
        assert ou_grid.time[-1] == ou_spec.horizon_T
        assert ou_grid.axis_names[0] == "t"
        assert ou_grid.n_action_nodes == 3

    def test_checksum_and_roundtrip(self, ou_grid):
        again = GridDomain.from_dict(ou_grid.to_dict())
        assert again == ou_grid and again.checksum == ou_grid.checksum
        assert hash(again) == hash(ou_grid)

    def test_checksum_sensitive_to_nodes(self):
        assert unit_grid(11).checksum != unit_grid(12).checksum

    def test_rejects_bad_axis(self):
        with pytest.raises(GridError):
            GridDomain([np.array([0.0, 0.0, 1.0])])
        with pytest.raises(GridError):
            GridDomain([])

    def test_action_index_exact(self, walk_grid):
        assert list(walk_grid.action_index([[-1.0], [1.0]])) == [0, 1]
        with pytest.raises(GridError):
            walk_grid.action_index([[0.5]])


class TestEncodeDecode:
    def test_reward_encoding(self, walk_grid, walk_spec):
        v = encode(walk_spec.reward, walk_grid).reshape(11, 2)
        assert v[0, 0] == -0.25 and v[0, 1] == -0.25
        assert v[5, 0] == 0.0 and v[5, 1] == 0.0

    def test_encode_decode_identity(self, ou_grid):
        v = np.random.default_rng(0).standard_normal(ou_grid.size)
        assert np.array_equal(encode(decode(v, ou_grid), ou_grid), v)

    def test_affine_reproduced_exactly(self):
        g = plane_grid(7, 5)
        f = lambda t, s, a: 2.0 * s[:, 0] - 3.0 * s[:, 1] + 0.5
        q = decode(encode(f, g), g)
        x = np.random.default_rng(1).random((200, 2)) * [1.0, 2.0] - [0.0, 1.0]
        assert np.allclose(q.at(x), 2 * x[:, 0] - 3 * x[:, 1] + 0.5, atol=1e-13)

    def test_midpoint(self):
        q = decode([0.0, 1.0], unit_grid(2))
        assert q.at(np.array([[0.5]]))[0] == 0.5

    def test_quadratic_error_bound(self):
        g = unit_grid(11)
        q = decode(encode(s_only(lambda s: s ** 2), g), g)
        x = np.linspace(0, 1, 1001)[:, None]
        assert np.max(np.abs(q.at(x) - x[:, 0] ** 2)) <= 0.1 ** 2 * 2 / 8 + 1e-15

    def test_matches_scipy_interpolator(self):
        g = plane_grid(6, 9)
        v = np.random.default_rng(2).standard_normal(g.size)
        x = np.random.default_rng(3).random((500, 2)) * [1.0, 2.0] - [0.0, 1.0]
        ref = RegularGridInterpolator(g.states, v.reshape(g.shape))(x)
        assert np.allclose(decode(v, g).at(x), ref, atol=1e-14)

    def test_errors(self, walk_grid):
        with pytest.raises(LengthMismatch):
            decode(np.zeros(3), walk_grid)
        with pytest.raises(NonFiniteValue) as exc:
            encode(lambda t, s, a: np.where(s[:, 0] > 0.45, np.nan, 0.0), walk_grid)
        assert exc.value.index == 10
        with pytest.raises(DomainMismatch):
            decode(np.zeros(22), walk_grid) + decode(np.zeros(11), unit_grid(11))

    def test_values_read_only(self, walk_grid):
        q = decode(np.zeros(22), walk_grid)
        with pytest.raises(ValueError):
            q.values[0] = 1.0

    def test_continuation_is_max_over_actions(self, walk_grid):
        v = np.random.default_rng(4).standard_normal(22)
        q = decode(v, walk_grid)
        s = walk_grid.states[0][:, None]
        assert np.array_equal(q.continuation(0.0, s), v.reshape(11, 2).max(axis=1))

    @given(st.integers(0, 10_000))
    def test_decode_is_one_lipschitz_in_sup(self, seed):
        rng = np.random.default_rng(seed)
        g = plane_grid(5, 4)
        v, w = rng.standard_normal((2, g.size))
        x = rng.random((50, 2)) * [1.0, 2.0] - [0.0, 1.0]
        gap = np.max(np.abs(decode(v, g).at(x) - decode(w, g).at(x)))
        assert gap <= np.max(np.abs(v - w)) + 1e-12

    @given(st.integers(0, 10_000))
    def test_values_stay_in_node_hull(self, seed):
        rng = np.random.default_rng(seed)
        g = plane_grid(4, 6)
        v = rng.standard_normal(g.size)
        y = decode(v, g).at(rng.random((50, 2)) * [1.0, 2.0] - [0.0, 1.0])
        assert np.all(y <= v.max() + 1e-12) and np.all(y >= v.min() - 1e-12)


def reconstruction_error(fn, n):
    g = unit_grid(n)
    f = s_only(fn)
    return sup_distance(decode(encode(f, g), g), f, n_dense=20_000).value


class TestScaling:
    def test_smooth_function_second_order(self):
        fn = lambda s: np.sin(3 * s) + s ** 2
        ratio = reconstruction_error(fn, 21) / reconstruction_error(fn, 11)
        assert 0.2 <= ratio <= 0.3

    def test_kinked_function_first_order(self):
        fn = lambda s: np.abs(s - 1 / 3)
        ratio = reconstruction_error(fn, 21) / reconstruction_error(fn, 11)
        assert 0.4 <= ratio <= 0.6


class TestSupDistance:
    def test_identical_is_zero(self, walk_grid):
        q = decode(np.arange(22.0), walk_grid)
        assert sup_distance(q, q).value == 0.0

    def test_constants(self, walk_grid):
        d = sup_distance(decode(np.full(22, 3.0), walk_grid),
                         decode(np.full(22, 1.0), walk_grid))
        assert d.value == 2.0

    def test_first_iterate_matches_closed_form(self, walk_grid, walk_spec):
        from bellman_resnet.bellman_engine import bellman_apply

        q1 = bellman_apply(walk_spec, decode(np.zeros(22), walk_grid))
        ref = lambda t, s, a: -(s[:, 0] - 0.5) ** 2
        # the closed form holds at the nodes; between them the interpolant is O(h^2) off
        assert sup_distance(q1, ref, n_dense=0).value <= 1e-12

    def test_dense_points_catch_interior_peak(self):
        g = unit_grid(3)
        d = sup_distance(decode(np.zeros(3), g), s_only(lambda s: np.sin(np.pi * 2 * s) ** 2))
        assert d.value > 0.9 and 0.0 < d.x_cont[0] < 1.0


class TestLipschitz:
    def test_constant(self, walk_grid):
        assert estimate_lipschitz(decode(np.full(22, 7.0), walk_grid)) == 0.0

    def test_reward_slope(self, walk_grid, walk_spec):
        est = estimate_lipschitz(decode(encode(walk_spec.reward, walk_grid),
                                        walk_grid))
        assert 0.9 <= est <= 1.0

    def test_linear(self):
        g = unit_grid(11)
        est = estimate_lipschitz(decode(encode(s_only(lambda s: 2 * s), g), g))
        assert est == pytest.approx(2.0, abs=1e-9)

    def test_bounds_bracket(self):
        g = plane_grid(6, 5)
        v = np.random.default_rng(5).standard_normal(g.size)
        lo, hi = lipschitz_bounds(g, v)
        est = estimate_lipschitz(decode(v, g), n_pairs=5000)
        assert lo <= est <= hi + 1e-12


class TestBumps:
    def test_caps_respected(self, ou_grid):
        v = random_bump_values(ou_grid, np.random.default_rng(0), 200, amplitude=0.5,
                               lipschitz_cap=2.0)
        assert np.abs(v).max() <= 0.5 + 1e-12
        _, upper = lipschitz_bounds(ou_grid, v)
        assert np.all(upper <= 2.0 + 1e-9)

    def test_deterministic(self, walk_grid):
        a = random_bump_values(walk_grid, np.random.default_rng(9), 5)
        b = random_bump_values(walk_grid, np.random.default_rng(9), 5)
        assert np.array_equal(a, b)


class TestSerialization:
    def test_roundtrip_and_bytes(self, tmp_path, ou_grid):
        v = random_bump_values(ou_grid, np.random.default_rng(1), 1)[0]
        q = decode(v, ou_grid)
        c1, j1 = save_grid_function(q, tmp_path / "a", {"k": 1})
        c2, j2 = save_grid_function(q, tmp_path / "b", {"k": 1})
        assert c1.read_bytes() == c2.read_bytes() and j1.read_bytes() == j2.read_bytes()
        back = load_grid_function(tmp_path / "a")
        assert back.domain == ou_grid and np.array_equal(back.values, v)

    def test_csv_header_and_labels(self, tmp_path, walk_grid):
        c, _ = save_grid_function(decode(np.zeros(22), walk_grid), tmp_path / "q")
        lines = c.read_text().splitlines()
        assert lines[0] == "s0,action,value"
        assert lines[1].split(",")[1] == "a_L" and lines[2].split(",")[1] == "a_R"

    def test_tampered_values_rejected(self, tmp_path, walk_grid):
        c, _ = save_grid_function(decode(np.zeros(22), walk_grid), tmp_path / "q")
        c.write_text(c.read_text().replace("0.0\n", "1.0\n", 1))
        with pytest.raises(GridError):
            load_grid_function(tmp_path / "q")


def test_interpolate_clamps_outside():
    g = unit_grid(3)
    out = interpolate(g.states, np.array([[0.0], [1.0], [4.0]]), np.array([[-1.0], [2.0]]))
    assert list(out[:, 0]) == [0.0, 4.0]


def test_grid_function_arithmetic(walk_grid):
    q = decode(np.ones(22), walk_grid)
    assert ((2 * q - q) + 1).sup_norm() == 2.0
    assert (-q).values[0] == -1.0
    assert isinstance(1.0 - q, GridFunction)


def test_for_spec_wrong_node_count(ou_spec):
    with pytest.raises(GridError):
        GridDomain.for_spec(ou_spec, [5, 5])


def test_spec_2d_grid_builds():
    spec = make_spec("constant", {"drift": 0.0, "sigma": 0.0})
    g = GridDomain.for_spec(spec, 5)
    assert g.size == g.shape[0] * np.prod(g.shape[1:])
