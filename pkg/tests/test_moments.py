import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import random_psd, scalar_problem, single_controller_problem
from mldsc.errors import ContractError, SingularityError
from mldsc.model import BlockPartition, LqgProblem, paper_experiment
from mldsc.moments import (
    GainRule,
    conditional_covariance,
    gain_from_indices,
    gains_from_indices,
    joint_memory_gain,
    memory_gain,
    propagate_covariance,
    propagate_moments,
)
from mldsc.numerics import MatrixTrajectory, TimeGrid
from mldsc.riccati import solve_riccati

PART3 = BlockPartition(1, (1, 1))


class TestMemoryGain:
    def test_identity_covariance(self):
        K = memory_gain(np.eye(3), 0, PART3)
        expected = np.zeros((3, 3))
        expected[1, 1] = 1.0
        assert np.array_equal(K, expected)

    def test_correlated_state(self):
        S = np.array([[2.0, 1, 0], [1, 1, 0], [0, 0, 1]])
        assert np.array_equal(memory_gain(S, 0, PART3), [[0, 1, 0], [0, 1, 0], [0, 0, 0]])

    def test_fully_correlated(self):
        S = np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]])
        K = memory_gain(S, 0, PART3)
        assert np.allclose(K[:, 1], [0.5, 1.0, 0.5], atol=1e-15)
        assert np.all(K[:, [0, 2]] == 0)

    def test_column_structure(self):
        rng = np.random.default_rng(0)
        part = BlockPartition(2, (2, 1))
        for _ in range(20):
            S = random_psd(rng, 5) + 0.1 * np.eye(5)
            for i in range(part.N):
                K = memory_gain(S, i, part)
                idx = part.z_indices(i)
                off = np.setdiff1d(np.arange(5), idx)
                e = np.zeros(5)
                e[idx] = rng.standard_normal(idx.size)
                v = np.zeros(5)
                v[off] = rng.standard_normal(off.size)
                # identity on the z^i block; the other rows carry the regression coefficients
                assert np.array_equal((K @ e)[idx], e[idx])
                assert np.allclose((K @ e)[off], (S[np.ix_(off, idx)] @ np.linalg.solve(S[np.ix_(idx, idx)], e[idx])))
                assert np.array_equal(K[np.ix_(idx, idx)], np.eye(idx.size))
                assert np.array_equal(K @ v, np.zeros(5))

    def test_conditional_mean_property(self):
        # K_i s is the conditional mean of a zero-mean Gaussian given z^i
        rng = np.random.default_rng(1)
        S = random_psd(rng, 3) + 0.2 * np.eye(3)
        K = memory_gain(S, 1, PART3)
        resid_cov = (np.eye(3) - K) @ S
        assert np.allclose(resid_cov[:, 2], 0.0, atol=1e-12)

    def test_singular_block(self):
        with pytest.raises(SingularityError, match="z1"):
            memory_gain(np.diag([1.0, 1.0, 0.0]), 1, PART3)

    def test_batched_matches(self):
        rng = np.random.default_rng(2)
        S = np.stack([random_psd(rng, 3) + 0.1 * np.eye(3) for _ in range(6)])
        idx = PART3.z_indices(1)
        batch = gains_from_indices(S, idx)
        for k in range(6):
            assert np.allclose(batch[k], gain_from_indices(S[k], idx), atol=1e-14)


class TestJointMemoryGain:
    def test_identity_covariance(self):
        assert np.array_equal(joint_memory_gain(np.eye(3), PART3), np.diag([0.0, 1.0, 1.0]))

    def test_single_controller_coincides(self):
        part = BlockPartition(2, (2,))
        S = random_psd(np.random.default_rng(3), 4) + np.eye(4)
        assert np.array_equal(joint_memory_gain(S, part), memory_gain(S, 0, part))

    def test_hand_example(self):
        S = np.array([[2.0, 1, 1], [1, 2, 0], [1, 0, 2]])
        K = joint_memory_gain(S, PART3)
        assert np.allclose(K[0, 1:], [0.5, 0.5], atol=1e-15)
        assert np.array_equal(K[1:, 1:], np.eye(2))
        assert np.all(K[:, 0] == 0)


class TestConditionalCovariance:
    def test_hand_schur(self):
        assert conditional_covariance(np.array([[2.0, 1], [1, 1]]), [0], [1])[0, 0] == pytest.approx(1.0)

    def test_independent_blocks(self):
        S = np.diag([3.0, 2.0, 5.0])
        assert np.array_equal(conditional_covariance(S, [0, 2], [1]), np.diag([3.0, 5.0]))

    def test_random_psd_ordering(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            S = random_psd(rng, 4, rank=rng.integers(2, 5)) + 1e-3 * np.eye(4)
            C = conditional_covariance(S, [0, 1], [2, 3])
            assert np.array_equal(C, C.T)
            assert np.linalg.eigvalsh(C).min() >= -1e-10
            assert np.linalg.eigvalsh(S[:2, :2] - C).min() >= -1e-10

    def test_overlap(self):
        with pytest.raises(ContractError, match="overlap"):
            conditional_covariance(np.eye(3), [0, 1], [1, 2])

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            conditional_covariance(np.eye(3), [0], [3])


def _zero_traj(grid, d):
    z = np.zeros((grid.n_steps + 1, d, d))
    return MatrixTrajectory(grid, z, z, symmetric=True)


class TestPropagation:
    def test_zero_mean_stays_zero(self, paper):
        g = TimeGrid(paper.T, 200)
        Psi = solve_riccati(paper, g)
        m = propagate_moments(paper, Psi, Psi)
        assert np.array_equal(m.mu.values, np.zeros_like(m.mu.values))

    def test_pure_diffusion(self):
        p = scalar_problem(A=0.0, sigma=1.0, Sigma0=0.0, T=1.0)
        g = TimeGrid(1.0, 100)
        zero = _zero_traj(g, 2)
        m = propagate_moments(p, zero, zero)
        assert abs(m.Sigma.terminal[0, 0] - 1.0) <= 1e-9
        assert np.allclose(m.Sigma.values[:, 0, 0], g.times, atol=1e-12)

    def test_boundary_exact(self, paper):
        g = TimeGrid(paper.T, 100)
        Psi = solve_riccati(paper, g)
        m = propagate_moments(paper, Psi, Psi)
        assert np.array_equal(m.Sigma.initial, paper.Sigma0)
        assert np.array_equal(m.mu.initial[:, 0], paper.mu0)

    def test_mean_uses_standard_gain(self):
        p = single_controller_problem()
        g = TimeGrid(p.T, 400)
        Psi = solve_riccati(p, g)
        brb = p.total_control_weight()
        # a nonsense Phi must not touch the mean
        garbage = MatrixTrajectory(g, np.broadcast_to(5 * np.eye(2), (401, 2, 2)))
        mu = propagate_moments(p, Psi, garbage).mu
        ref = solve_ivp(
            lambda t, m: (p.A - brb @ _psi_dense(p)(t)) @ m, (0, p.T), p.mu0, rtol=1e-11, atol=1e-13
        ).y[:, -1]
        assert np.allclose(mu.terminal[:, 0], ref, atol=1e-8)

    def test_identity_rule_matches_lyapunov_oracle(self):
        p = single_controller_problem()
        g = TimeGrid(p.T, 400)
        Psi = solve_riccati(p, g)
        Sigma = propagate_moments(p, Psi, Psi, GainRule.IDENTITY).Sigma
        psi = _psi_dense(p)
        brb, D = p.total_control_weight(), p.diffusion()

        def rhs(t, y):
            S = y.reshape(2, 2)
            Acl = p.A - brb @ psi(t)
            return (D + Acl @ S + S @ Acl.T).ravel()

        ref = solve_ivp(rhs, (0, p.T), p.Sigma0.ravel(), rtol=1e-11, atol=1e-13).y[:, -1].reshape(2, 2)
        assert np.allclose(Sigma.terminal, ref, atol=1e-8)

    def test_fourth_order_in_dt(self):
        p = paper_experiment().with_changes(T=2.0)
        ends = []
        for n in (50, 100, 200):
            g = TimeGrid(p.T, n)
            Psi = solve_riccati(p, g)
            ends.append(propagate_covariance(p, Psi, GainRule.PER_CONTROLLER).terminal)
        ratio = np.abs(ends[0] - ends[1]).max() / np.abs(ends[1] - ends[2]).max()
        assert 12 <= ratio <= 20

    @pytest.mark.parametrize("rule", list(GainRule))
    def test_engines_agree(self, rule):
        p = paper_experiment().with_changes(T=3.0)
        g = TimeGrid(p.T, 300)
        Psi = solve_riccati(p, g)
        a = propagate_covariance(p, Psi, rule, "compiled")
        b = propagate_covariance(p, Psi, rule, "python")
        assert np.abs(a.values - b.values).max() <= 1e-12 * np.abs(b.values).max()

    def test_singular_memory_raises(self):
        p = scalar_problem().with_changes(Sigma0=np.diag([1.0, 0.0]))
        g = TimeGrid(1.0, 10)
        Psi = solve_riccati(p, g)
        for engine in ("compiled", "python"):
            with pytest.raises(SingularityError):
                propagate_covariance(p, Psi, GainRule.PER_CONTROLLER, engine)

    def test_controller_relabeling_permutes(self):
        p = _asymmetric_two_controller()
        perm = [0, 2, 1]
        Pm = np.eye(3)[perm]
        q = LqgProblem(
            partition=p.partition,
            A=Pm @ p.A @ Pm.T,
            B=(Pm @ p.B[1], Pm @ p.B[0]),
            sigma=Pm @ p.sigma,
            Q=Pm @ p.Q @ Pm.T,
            R=(p.R[1], p.R[0]),
            P=Pm @ p.P @ Pm.T,
            mu0=Pm @ p.mu0,
            Sigma0=Pm @ p.Sigma0 @ Pm.T,
            T=p.T,
        )
        g = TimeGrid(p.T, 200)
        mp = propagate_moments(p, solve_riccati(p, g), solve_riccati(p, g))
        mq = propagate_moments(q, solve_riccati(q, g), solve_riccati(q, g))
        assert np.allclose(mq.Sigma.values, Pm @ mp.Sigma.values @ Pm.T, atol=1e-11)
        assert np.allclose(mq.mu.values[:, :, 0], mp.mu.values[:, :, 0] @ Pm.T, atol=1e-12)
        S = mp.Sigma.values[77]
        assert np.allclose(memory_gain(Pm @ S @ Pm.T, 1, q.partition), Pm @ memory_gain(S, 0, p.partition) @ Pm.T)

    def test_preset_symmetry_and_psd(self, paper_dsc):
        S = paper_dsc.moments.Sigma
        assert np.abs(S.values[:, 1, 1] - S.values[:, 2, 2]).max() <= 1e-8
        assert S.max_asymmetry() <= 1e-12
        eig = np.linalg.eigvalsh(S.values)
        assert np.all(eig[:, 0] >= -1e-8 * eig[:, -1])


def _asymmetric_two_controller(T=1.5):
    return LqgProblem(
        partition=BlockPartition(1, (1, 1)),
        A=np.array([[0.3, 0.1, 0.0], [1.0, -0.2, 0.0], [0.5, 0.0, -0.1]]),
        B=(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.2]]), np.array([[0.5], [0.0], [1.0]])),
        sigma=np.diag([1.0, 0.7, 0.4]),
        Q=np.diag([1.0, 0.1, 0.0]),
        R=(np.diag([1.0, 2.0]), np.array([[0.5]])),
        P=np.diag([0.2, 0.0, 0.0]),
        mu0=np.array([0.5, -0.1, 0.2]),
        Sigma0=np.diag([1.0, 0.5, 2.0]),
        T=T,
    )


def _psi_dense(p):
    """Independent standard-Riccati solution from an adaptive integrator."""
    d = p.d_s
    brb = p.total_control_weight()

    def rhs(t, y):
        X = y.reshape(d, d)
        return -(p.Q + p.A.T @ X + X @ p.A - X @ brb @ X).ravel()

    sol = solve_ivp(rhs, (p.T, 0.0), p.P.ravel(), rtol=1e-12, atol=1e-14, dense_output=True)
    return lambda t: sol.sol(t).reshape(d, d)
