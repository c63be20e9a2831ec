import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mldsc.errors import ContractError, IntegrationError, RangeError, SingularityError
from mldsc.numerics import (
    MatrixTrajectory,
    StageTable,
    TimeGrid,
    default_grid,
    integrate_ode,
    read_csv,
    sample_at,
    sample_hermite,
    sample_many,
    spd_solve,
    symmetrize,
)


class TestTimeGrid:
    def test_last_node_is_exactly_T(self):
        g = TimeGrid(0.3, 7)
        assert g.times[-1] == 0.3
        assert g.times[0] == 0.0
        assert np.all(np.diff(g.times) > 0)

    def test_default_grid_step(self):
        g = default_grid(10.0)
        assert g.n_steps == 10_000
        assert g.dt == pytest.approx(1e-3)

    @pytest.mark.parametrize("T, n", [(1.0, 0), (0.0, 5), (-1.0, 5), (float("nan"), 3)])
    def test_rejects_bad_grid(self, T, n):
        with pytest.raises(ContractError):
            TimeGrid(T, n)

    def test_prefix_keeps_step(self):
        g = TimeGrid(10.0, 1000)
        h = g.prefix(250)
        assert h.n_steps == 250
        assert h.dt == pytest.approx(g.dt, rel=1e-14)
        assert g.prefix(1000) is g


class TestIntegrateOde:
    def test_zero_rhs_keeps_boundary(self):
        M = np.array([[1.0, 2.0], [3.0, 4.0]])
        traj = integrate_ode(lambda t, X: np.zeros_like(X), M, TimeGrid(1.0, 10))
        assert np.array_equal(traj.values, np.broadcast_to(M, (11, 2, 2)))

    def test_exponential(self):
        traj = integrate_ode(lambda t, m: m, 1.0, TimeGrid(1.0, 1000))
        assert abs(traj.terminal[0, 0] - math.e) <= 1e-8
        assert traj.initial[0, 0] == 1.0

    def test_backward_linear(self):
        traj = integrate_ode(lambda t, m: -np.ones_like(m), 0.0, TimeGrid(1.0, 100), "backward")
        assert abs(traj.initial[0, 0] - 1.0) <= 1e-12
        assert traj.terminal[0, 0] == 0.0

    def test_fourth_order(self):
        errs = []
        for n in (8, 16):
            m1 = integrate_ode(lambda t, m: m, 1.0, TimeGrid(1.0, n)).terminal[0, 0]
            errs.append(abs(m1 - math.e))
        assert 12 <= errs[0] / errs[1] <= 20

    def test_backward_equals_reflected_forward(self):
        def f(t, M):
            return np.sin(t) * M - M @ M + np.eye(2) * t

        grid = TimeGrid(1.5, 300)
        T = grid.T
        M_T = np.array([[0.2, 0.1], [0.1, 0.3]])
        back = integrate_ode(lambda t, M: f(t, M), M_T, grid, "backward")
        fwd = integrate_ode(lambda tau, M: -f(T - tau, M), M_T, grid, "forward")
        assert np.abs(back.values - fwd.values[::-1]).max() <= 1e-12

    def test_symmetric_flag(self):
        def rhs(t, M):
            return np.array([[0.0, 1.0], [0.0, 0.0]]) @ M

        traj = integrate_ode(rhs, np.eye(2), TimeGrid(1.0, 10), symmetric=True)
        assert traj.max_asymmetry() == 0.0

    def test_blow_up_reports_node(self):
        # m' = m^2 from m(0) = 1 escapes at t = 1
        with pytest.raises(IntegrationError) as info:
            integrate_ode(lambda t, m: m * m * 1e3, 1.0, TimeGrid(2.0, 200))
        assert info.value.node is not None and 0 < info.value.node <= 200
        assert info.value.step == info.value.node

    def test_node_derivatives_stored(self):
        traj = integrate_ode(lambda t, m: 2 * t * np.ones_like(m), 0.0, TimeGrid(1.0, 4))
        assert np.allclose(traj.derivs[:, 0, 0], 2 * traj.grid.times)
        assert np.allclose(traj.values[:, 0, 0], traj.grid.times**2, atol=1e-14)

    def test_bad_direction(self):
        with pytest.raises(ContractError):
            integrate_ode(lambda t, m: m, 1.0, TimeGrid(1.0, 2), "sideways")


class TestSampling:
    def test_exact_at_nodes(self):
        g = TimeGrid(1.0, 10)
        traj = MatrixTrajectory(g, np.random.default_rng(0).standard_normal((11, 2, 2)))
        for k, t in enumerate(g.times):
            assert np.array_equal(sample_at(traj, t), traj.values[k])

    def test_constant(self):
        traj = MatrixTrajectory(TimeGrid(2.0, 4), np.full((5, 1, 1), 3.5))
        for t in (0.0, 0.1, 1.37, 2.0):
            assert sample_at(traj, t)[0, 0] == 3.5

    def test_linear_midpoint(self):
        traj = MatrixTrajectory(TimeGrid(1.0, 1), np.array([0.0, 2.0]))
        assert sample_at(traj, 0.25)[0, 0] == 0.5

    @pytest.mark.parametrize("t", [-0.1, 1.1])
    def test_range(self, t):
        traj = MatrixTrajectory(TimeGrid(1.0, 4), np.zeros(5))
        with pytest.raises(RangeError):
            sample_at(traj, t)
        with pytest.raises(RangeError):
            sample_many(traj, [0.5, t])

    def test_hermite_exact_for_cubics(self):
        g = TimeGrid(1.0, 5)
        t = g.times
        traj = MatrixTrajectory(g, t**3 - t, 3 * t**2 - 1)
        for s in (0.03, 0.5, 0.77, 0.999):
            assert sample_hermite(traj, s)[0, 0] == pytest.approx(s**3 - s, abs=1e-14)
        assert np.allclose(traj.midpoints()[:, 0, 0], ((t[:-1] + 0.1) ** 3 - (t[:-1] + 0.1)), atol=1e-14)

    def test_sample_many_matches_scalar_calls(self):
        g = TimeGrid(1.0, 7)
        rng = np.random.default_rng(1)
        traj = MatrixTrajectory(g, rng.standard_normal((8, 2, 3)), rng.standard_normal((8, 2, 3)))
        ts = np.concatenate([g.times, rng.uniform(0, 1, 20)])
        many = sample_many(traj, ts)
        herm = sample_many(traj, ts, hermite=True)
        for j, t in enumerate(ts):
            assert np.allclose(many[j], sample_at(traj, t), atol=1e-15)
            assert np.allclose(herm[j], sample_hermite(traj, t), atol=1e-14)

    def test_stage_table_hits_nodes_and_midpoints(self):
        g = TimeGrid(1.0, 4)
        t = g.times
        traj = MatrixTrajectory(g, t**2, 2 * t)
        table = StageTable(traj)
        assert table(0.5)[0, 0] == 0.25
        assert table(0.125)[0, 0] == pytest.approx(0.125**2, abs=1e-15)
        assert table(0.3)[0, 0] == pytest.approx(0.09, abs=1e-15)


class TestSymmetrize:
    def test_fixed_point(self):
        M = np.array([[1.0, 2.0], [2.0, 5.0]])
        assert np.array_equal(symmetrize(M), M)

    def test_average(self):
        assert np.array_equal(symmetrize([[0.0, 2.0], [0.0, 0.0]]), [[0.0, 1.0], [1.0, 0.0]])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=9, max_size=9))
    @settings(max_examples=50, deadline=None)
    def test_exactly_symmetric(self, xs):
        S = symmetrize(np.reshape(xs, (3, 3)))
        assert np.array_equal(S, S.T)

    def test_non_square(self):
        with pytest.raises(ContractError):
            symmetrize(np.zeros((2, 3)))


class TestSpdSolve:
    def test_identity(self):
        M = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(spd_solve(np.eye(2), M), M)

    def test_scalar(self):
        assert spd_solve([[4.0]], [[2.0]])[0, 0] == 0.5

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(3)
        S = rng.standard_normal((4, 4))
        S = S @ S.T + np.eye(4)
        B = rng.standard_normal((4, 2))
        assert np.allclose(spd_solve(S, B), np.linalg.solve(S, B), rtol=1e-12)

    def test_singular_falls_back_to_jitter(self):
        # The ones matrix cannot satisfy S X = I for any X; the jittered
        # solve reproduces the pseudo-inverse projector S S^+ instead.
        S = np.ones((2, 2))
        X = spd_solve(S, np.eye(2))
        assert np.all(np.isfinite(X))
        assert np.abs(S @ X - S @ np.linalg.pinv(S)).max() <= 1e-6

    def test_indefinite_raises(self):
        with pytest.raises(SingularityError, match="Sigma_zz"):
            spd_solve(np.diag([1.0, -1.0]), np.eye(2), "Sigma_zz")

    def test_non_finite_raises(self):
        with pytest.raises(SingularityError):
            spd_solve(np.array([[np.nan]]), np.eye(1))


class TestCsv:
    def test_round_trip(self, tmp_path):
        g = TimeGrid(1.0, 3)
        vals = np.random.default_rng(2).standard_normal((4, 2, 2)) / 3
        MatrixTrajectory(g, vals).to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "t,m_0_0,m_0_1,m_1_0,m_1_1"
        assert len(lines) == 5
        back = read_csv(tmp_path / "m.csv")
        assert np.array_equal(back.values, vals)
        assert np.array_equal(back.grid.times, g.times)
