import numpy as np
import pytest

from lpvarpro.mmgks import (GksState, MmgksConfig, expand_subspace,
                            golub_kahan, init_gks, majorant_weights, mm_lambda,
                            mmgks_solve, objective_value, project_and_solve)
from lpvarpro.operators import MatrixOperator
from lpvarpro.problems import make_1d_problem
from lpvarpro.regularizers import (IdentityRegularizer, MatrixRegularizer,
                                   first_derivative_1d)


class TestMajorantWeights:
    def test_zero_input(self):
        np.testing.assert_allclose(majorant_weights(np.array([0.0]), 1, 0.1),
                                   [10.0], rtol=1e-14)

    def test_p_two_gives_ones(self):
        u = np.array([-3.0, 0.0, 5.5])
        np.testing.assert_array_equal(majorant_weights(u, 2, 0.0), np.ones(3))

    def test_example_value(self):
        np.testing.assert_allclose(majorant_weights(np.array([3.0]), 1, 4.0),
                                   [0.2], rtol=1e-14)

    def test_requires_epsilon_for_small_p(self):
        with pytest.raises(ValueError):
            majorant_weights(np.array([1.0]), 0.8, 0.0)


class TestObjectiveValue:
    def test_all_terms_at_zero(self):
        G = np.eye(5)
        L = IdentityRegularizer(5)
        val = objective_value(np.zeros(5), G, np.zeros(5), L,
                              lam=2.0, p=1.0, epsilon=0.1)
        assert val == pytest.approx(2.0 * 5 * 0.1, rel=1e-14)

    def test_p2_eps0_is_tikhonov(self):
        rng = np.random.default_rng(0)
        G = rng.standard_normal((8, 6))
        x = rng.standard_normal(6)
        d = rng.standard_normal(8)
        L = MatrixRegularizer(first_derivative_1d(6))
        val = objective_value(x, G, d, L, lam=0.7, p=2.0, epsilon=0.0)
        expected = np.linalg.norm(G @ x - d) ** 2 \
            + 0.7 * np.linalg.norm(L.dense() @ x) ** 2
        assert val == pytest.approx(expected, rel=1e-13)

    def test_matches_elementwise_loop(self):
        rng = np.random.default_rng(1)
        G = rng.standard_normal((7, 5))
        x = rng.standard_normal(5)
        d = rng.standard_normal(7)
        L = IdentityRegularizer(5)
        lam, p, eps = 0.3, 1.3, 0.05
        acc = float(np.linalg.norm(G @ x - d) ** 2)
        for t in x:
            acc += lam * (t * t + eps * eps) ** (p / 2)
        assert objective_value(x, G, d, L, lam, p, eps) == pytest.approx(
            acc, rel=1e-13)

    def test_rejects_p_le_one_without_eps(self):
        with pytest.raises(ValueError):
            objective_value(np.zeros(3), np.eye(3), np.zeros(3),
                            IdentityRegularizer(3), 1.0, 1.0, 0.0)


class TestGolubKahan:
    def test_single_step_direction(self):
        rng = np.random.default_rng(2)
        G = rng.standard_normal((12, 8))
        d = rng.standard_normal(12)
        _, _, v, _ = golub_kahan(G, d, 1)
        expected = G.T @ d / np.linalg.norm(G.T @ d)
        np.testing.assert_allclose(np.abs(v[:, 0]), np.abs(expected),
                                   rtol=1e-12)

    def test_bidiagonal_relation(self):
        rng = np.random.default_rng(3)
        G = rng.standard_normal((30, 20))
        d = rng.standard_normal(30)
        u, b, v, breakdown = golub_kahan(G, d, 5)
        assert not breakdown
        resid = np.linalg.norm(G @ v - u @ b)
        assert resid <= 1e-10 * np.linalg.norm(G)
        np.testing.assert_allclose(v.T @ v, np.eye(5), atol=1e-12)
        np.testing.assert_allclose(u.T @ u, np.eye(6), atol=1e-12)

    def test_breakdown_flagged(self):
        # rank-1 G: the second bidiagonalization step must break down
        G = np.outer(np.arange(1.0, 7.0), np.ones(5))
        d = np.arange(1.0, 7.0)
        _, _, v, breakdown = golub_kahan(G, d, 4)
        assert breakdown
        assert v.shape[1] < 4


class TestProjectAndSolve:
    def _state(self, G, L, d, ell):
        state = init_gks(G, d, ell, L)
        state.set_weights(np.ones(L.q))
        return state

    def test_matches_dense_normal_equations(self):
        rng = np.random.default_rng(4)
        G = rng.standard_normal((20, 15))
        L = IdentityRegularizer(15)
        d = rng.standard_normal(20)
        state = self._state(G, L, d, 6)
        eta = 0.37
        z = project_and_solve(state, eta, state.q_g.T @ d)
        lhs = state.r_g.T @ state.r_g + eta * state.r_l.T @ state.r_l
        rhs = state.r_g.T @ (state.q_g.T @ d)
        np.testing.assert_allclose(z, np.linalg.solve(lhs, rhs), rtol=1e-10)

    def test_large_eta_shrinks_solution(self):
        rng = np.random.default_rng(5)
        G = rng.standard_normal((20, 15))
        L = IdentityRegularizer(15)
        d = rng.standard_normal(20)
        state = self._state(G, L, d, 5)
        z = project_and_solve(state, 1e14, state.q_g.T @ d)
        assert np.linalg.norm(z) <= 1e-10

    def test_orthonormal_columns_diagonal_case(self):
        rng = np.random.default_rng(6)
        G, _ = np.linalg.qr(rng.standard_normal((30, 12)))
        d = rng.standard_normal(30)
        v = np.eye(12)[:, :4]
        gv = G @ v
        lv = v.copy()
        state = GksState(v, gv, lv)
        state.set_weights(np.ones(12))
        eta = 0.9
        z = project_and_solve(state, eta, state.q_g.T @ d)
        expected = (v.T @ (G.T @ d)) / (1.0 + eta)
        np.testing.assert_allclose(z, expected, rtol=1e-12)

    def test_singular_projected_system_raises(self):
        v = np.eye(4)[:, :2]
        gv = np.zeros((4, 2))
        state = GksState(v, gv, np.zeros((4, 2)))
        state.set_weights(np.ones(4))
        with pytest.raises(ValueError, match="null space"):
            project_and_solve(state, 1.0, np.zeros(2))


class TestExpandSubspace:
    def test_declines_at_exact_solution(self):
        rng = np.random.default_rng(7)
        G = rng.standard_normal((10, 6))
        L = IdentityRegularizer(6)
        d = rng.standard_normal(10)
        eta = 0.5
        # saturate the subspace so the projected solve is the full-space one
        state = init_gks(G, d, 6, L)
        state.set_weights(np.ones(6))
        z = project_and_solve(state, eta, state.q_g.T @ d)
        grew = expand_subspace(state, z, eta, np.ones(6), G, L, d)
        assert not grew

    def test_new_direction_orthogonal(self):
        rng = np.random.default_rng(8)
        G = rng.standard_normal((25, 18))
        L = IdentityRegularizer(18)
        d = rng.standard_normal(25)
        state = init_gks(G, d, 5, L)
        state.set_weights(np.ones(18))
        z = project_and_solve(state, 0.1, state.q_g.T @ d)
        assert expand_subspace(state, z, 0.1, np.ones(18), G, L, d)
        k = state.k
        assert np.abs(state.v[:, :k - 1].T @ state.v[:, k - 1]).max() <= 1e-10

    def test_incremental_qr_matches_fresh(self):
        rng = np.random.default_rng(9)
        G = rng.standard_normal((25, 18))
        L = IdentityRegularizer(18)
        d = rng.standard_normal(25)
        state = init_gks(G, d, 5, L)
        state.set_weights(np.ones(18))
        z = project_and_solve(state, 0.1, state.q_g.T @ d)
        expand_subspace(state, z, 0.1, np.ones(18), G, L, d)
        q_fresh, r_fresh = np.linalg.qr(state.gv)
        recon_inc = state.q_g @ state.r_g
        recon_fresh = q_fresh @ r_fresh
        assert np.abs(recon_inc - recon_fresh).max() <= 1e-10
        assert np.abs(state.q_g.T @ state.q_g - np.eye(state.k)).max() <= 1e-10


def majorant_value(x, v, G, d, L, lam, p, eps):
    """Quadratic tangent majorant at v, with its constant reconstructed."""
    u_v = L.dense() @ v
    w = (u_v**2 + eps**2) ** (p / 2 - 1)
    phi_v = (u_v**2 + eps**2) ** (p / 2)
    c = lam * float((phi_v - (p / 2) * w * u_v**2).sum())
    u_x = L.dense() @ x
    return (float(np.linalg.norm(G @ x - d) ** 2)
            + lam * (p / 2) * float((w * u_x**2).sum()) + c)


class TestMajorantProperties:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.G = rng.standard_normal((12, 9))
        self.d = rng.standard_normal(12)
        self.L = MatrixRegularizer(first_derivative_1d(9))
        self.lam, self.p, self.eps = 0.4, 1.0, 1e-2
        self.v = rng.standard_normal(9)

    def test_tangency_value(self):
        q_at_v = majorant_value(self.v, self.v, self.G, self.d, self.L,
                                self.lam, self.p, self.eps)
        j_at_v = objective_value(self.v, self.G, self.d, self.L,
                                 self.lam, self.p, self.eps)
        assert q_at_v == pytest.approx(j_at_v, rel=1e-12)

    def test_tangency_gradient_by_finite_differences(self):
        h = 1e-6
        for j in range(9):
            e = np.zeros(9)
            e[j] = h
            dq = (majorant_value(self.v + e, self.v, self.G, self.d, self.L,
                                 self.lam, self.p, self.eps)
                  - majorant_value(self.v - e, self.v, self.G, self.d, self.L,
                                   self.lam, self.p, self.eps)) / (2 * h)
            dj = (objective_value(self.v + e, self.G, self.d, self.L,
                                  self.lam, self.p, self.eps)
                  - objective_value(self.v - e, self.G, self.d, self.L,
                                    self.lam, self.p, self.eps)) / (2 * h)
            assert dq == pytest.approx(dj, abs=1e-5 * max(1.0, abs(dj)))

    def test_domination(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            x = self.v + rng.standard_normal(9) * rng.uniform(0.01, 3.0)
            q = majorant_value(x, self.v, self.G, self.d, self.L,
                               self.lam, self.p, self.eps)
            j = objective_value(x, self.G, self.d, self.L,
                                self.lam, self.p, self.eps)
            assert q >= j - 1e-10 * max(1.0, abs(j))


class TestMmgksSolve:
    def test_identity_closed_form(self):
        rng = np.random.default_rng(12)
        d = rng.standard_normal(10)
        cfg = MmgksConfig(p=2.0, eta=0.5, subspace_dim=3, max_iters=5,
                          tol=1e-12)
        res = mmgks_solve(np.eye(10), IdentityRegularizer(10), d, cfg)
        np.testing.assert_allclose(res.x, d / 1.5, rtol=1e-8)
        assert res.iterations <= 2

    def test_matches_dense_tikhonov_1d(self):
        prob = make_1d_problem(n=64, sigma_true=2.0, level=0.01, seed=0)
        G = prob.operator(prob.y_true).dense()
        L = MatrixRegularizer(first_derivative_1d(64))
        eta = 1e-2
        cfg = MmgksConfig(p=2.0, eta=eta, subspace_dim=10, max_iters=80,
                          tol=1e-14)
        res = mmgks_solve(G, L, prob.d, cfg)
        dense = np.linalg.solve(G.T @ G + eta * (L.dense().T @ L.dense()),
                                G.T @ prob.d)
        assert np.linalg.norm(res.x - dense) <= 1e-6 * np.linalg.norm(dense)

    @pytest.mark.parametrize("p", [2.0, 1.0, 0.8])
    def test_objective_monotone_for_fixed_eta(self, p):
        prob = make_1d_problem(n=64, sigma_true=2.0, level=0.01, seed=1)
        L = MatrixRegularizer(first_derivative_1d(64))
        cfg = MmgksConfig(p=p, epsilon=1e-2, eta=5e-3, subspace_dim=10,
                          max_iters=60, tol=1e-16)
        res = mmgks_solve(prob.operator(prob.y_true), L, prob.d, cfg)
        objs = np.array(res.objectives)
        assert np.all(objs[1:] <= objs[:-1] + 1e-12 * np.abs(objs[:-1]))

    def test_limit_point_satisfies_reweighted_normal_equations(self):
        prob = make_1d_problem(n=48, sigma_true=2.0, level=0.01, seed=2)
        G = prob.operator(prob.y_true).dense()
        L = MatrixRegularizer(first_derivative_1d(48))
        eta = 1e-2
        cfg = MmgksConfig(p=1.0, epsilon=1e-2, eta=eta, subspace_dim=10,
                          max_iters=400, tol=1e-14)
        res = mmgks_solve(G, L, prob.d, cfg)
        ld = L.dense()
        w = majorant_weights(ld @ res.x, 1.0, 1e-2)
        lhs = (G.T @ G + eta * ld.T @ (w[:, None] * ld)) @ res.x
        rhs = G.T @ prob.d
        assert np.linalg.norm(lhs - rhs) <= 1e-6 * np.linalg.norm(rhs)

    def test_gcv_auto_mode_runs(self):
        prob = make_1d_problem(n=48, sigma_true=2.0, level=0.01, seed=3)
        cfg = MmgksConfig(p=1.0, epsilon=1e-2, subspace_dim=8, max_iters=15,
                          tol=1e-8)
        res = mmgks_solve(prob.operator(prob.y_true),
                          IdentityRegularizer(48), prob.d, cfg)
        assert len(res.etas) == res.iterations
        assert all(eta > 0 for eta in res.etas)

    def test_basis_orthonormality_maintained(self):
        prob = make_1d_problem(n=48, sigma_true=2.0, level=0.01, seed=4)
        G = prob.operator(prob.y_true)
        L = IdentityRegularizer(48)
        d = prob.d
        state = init_gks(G, d, 6, L)
        for _ in range(12):
            state.set_weights(np.ones(L.q))
            z = project_and_solve(state, 1e-3, state.q_g.T @ d)
            if not expand_subspace(state, z, 1e-3, np.ones(L.q), G, L, d):
                break
            gram = state.v.T @ state.v
            assert np.abs(gram - np.eye(state.k)).max() <= 1e-8

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MmgksConfig(p=2.5)
        with pytest.raises(ValueError):
            MmgksConfig(p=0.9, epsilon=0.0)
