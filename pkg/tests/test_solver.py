import numpy as np
import pytest
import scipy.sparse as sp

from tagcomplete.core import (
    FactorModel,
    Hyperparams,
    Orientation,
    StructureMatrix,
    TaggingMatrix,
    objective,
)
from tagcomplete.lasso import LassoProblem, solve_lasso
from tagcomplete.solver import (
    NumericalBlowupError,
    SolverWorkspace,
    basis_update_value,
    coeff_update_value,
    error_update_value,
    fit,
    initial_model,
    soft_threshold,
    update_basis,
    update_coeffs,
    update_error,
)

from oracles import dense_objective, scalar_min_by_search


def random_setup(rng, n=8, m=6, k=3, density=0.3, hp=None):
    hp = hp or Hyperparams(K=k, knn_k=3, eta=0.3, beta=0.5)
    D = TaggingMatrix.from_dense((rng.random((n, m)) < 0.4).astype(float))
    Sd = rng.normal(size=(n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(Sd, 0.0)
    Td = rng.normal(size=(m, m)) * (rng.random((m, m)) < density)
    np.fill_diagonal(Td, 0.0)
    S = StructureMatrix(sp.csr_matrix(Sd), Orientation.ROWS)
    T = StructureMatrix(sp.csr_matrix(Td), Orientation.COLUMNS)
    U = rng.normal(size=(n, k))
    U /= np.maximum(np.linalg.norm(U, axis=0, keepdims=True), 1.0)
    V = rng.normal(size=(k, m)) * (rng.random((k, m)) < 0.6)
    E = rng.normal(size=(n, m)) * (rng.random((n, m)) < 0.2)
    model = FactorModel(U=U, V=sp.csr_matrix(V), E=sp.csr_matrix(E))
    return D, S, T, model, hp


class TestScalarForms:
    def test_coeff_update_below_threshold_is_zero(self):
        assert coeff_update_value(0.5, 1.0, 1.0) == 0.0

    def test_coeff_update_above_threshold(self):
        assert coeff_update_value(2.0, 1.0, 1.0) == 1.0

    def test_coeff_update_matches_maxmin_expression(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p = float(rng.normal(scale=3.0))
            eta = float(rng.uniform(0.0, 2.0))
            denom = float(rng.uniform(0.1, 5.0))
            maxmin = (max(p, eta) + min(p, -eta)) / denom
            assert abs(coeff_update_value(p, eta, denom) - maxmin) <= 1e-12

    def test_coeff_update_matches_grid_search(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = float(rng.normal(scale=2.0))
            eta = float(rng.uniform(0.0, 1.5))
            denom = float(rng.uniform(0.2, 4.0))

            def f(v):
                return denom * v * v - 2.0 * p * v + 2.0 * eta * abs(v)

            got = coeff_update_value(p, eta, denom)
            _, best = scalar_min_by_search(f, radius=max(3.0 * abs(p) / denom, 1.0))
            assert f(got) <= best + 1e-6

    def test_basis_update_is_clipped_least_squares(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            q = float(rng.normal(scale=2.0))
            denom = float(rng.uniform(0.2, 4.0))

            def f(u):
                return denom * u * u - 2.0 * q * u

            got = basis_update_value(q, denom, radius=1.0)
            assert -1.0 <= got <= 1.0
            _, best = scalar_min_by_search(f, radius=1.0)
            assert f(got) <= best + 1e-6

    def test_error_update_below_threshold(self):
        assert error_update_value(0.2, 0.7) == 0.0

    def test_error_update_above_threshold(self):
        np.testing.assert_allclose(error_update_value(0.5, 0.7), 0.15)

    def test_error_update_matches_grid_search(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            r = float(rng.normal(scale=1.5))
            beta = float(rng.uniform(0.0, 2.0))

            def f(e):
                return (r - e) ** 2 + beta * abs(e)

            got = float(error_update_value(r, beta))
            _, best = scalar_min_by_search(f, radius=max(2.0 * abs(r), 1.0))
            assert f(got) <= best + 1e-6

    def test_error_update_zero_beta_absorbs_residual(self):
        r = np.array([[0.4, -2.0], [0.0, 7.0]])
        np.testing.assert_array_equal(error_update_value(r, 0.0), r)

    def test_soft_threshold_elementwise(self):
        x = np.array([-2.0, -0.3, 0.0, 0.3, 2.0])
        np.testing.assert_allclose(
            soft_threshold(x, 0.5), [-1.5, 0.0, 0.0, 0.0, 1.5]
        )


class TestUpdateCoeffs:
    def test_objective_non_increasing(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            D, S, T, model, hp = random_setup(rng)
            ws = SolverWorkspace(D, S, T, model, hp)
            before = ws.objective_value()
            update_coeffs(ws)
            after = ws.objective_value()
            assert after <= before + 1e-10 * abs(before)

    def test_fixed_point_stationary(self):
        rng = np.random.default_rng(11)
        D, S, T, model, hp = random_setup(rng)
        ws = SolverWorkspace(D, S, T, model, hp)
        for _ in range(500):
            before = ws.coeffs.copy()
            update_coeffs(ws)
            if np.abs(ws.coeffs - before).max() < 1e-12:
                break
        before = ws.coeffs.copy()
        update_coeffs(ws)
        assert np.abs(ws.coeffs - before).max() <= 1e-9

    def test_every_coordinate_beats_random_probes_at_fixed_point(self):
        rng = np.random.default_rng(12)
        D, S, T, model, hp = random_setup(rng, n=6, m=3, k=4)
        ws = SolverWorkspace(D, S, T, model, hp)
        for _ in range(500):
            before = ws.coeffs.copy()
            update_coeffs(ws)
            if np.abs(ws.coeffs - before).max() < 1e-13:
                break
        Dd, Sd, Td = D.to_dense(), S.matrix.toarray(), T.matrix.toarray()
        for k in range(4):
            for m in range(3):
                current = ws.coeffs[k, m]
                base = dense_objective(Dd, Sd, Td, ws.basis, ws.coeffs, ws.error, hp)
                probes = current + rng.normal(scale=0.3, size=1000)
                trial = ws.coeffs.copy()
                for v in probes:
                    trial[k, m] = v
                    assert (
                        dense_objective(Dd, Sd, Td, ws.basis, trial, ws.error, hp)
                        >= base - 1e-9
                    )

    def test_skips_zero_curvature_coordinates(self):
        D = TaggingMatrix.from_dense(np.ones((4, 3)))
        hp = Hyperparams(K=2, knn_k=2, lambda_=0.0)
        model = FactorModel(
            U=np.zeros((4, 2)), V=sp.csr_matrix((2, 3)), E=sp.csr_matrix((4, 3))
        )
        ws = SolverWorkspace(
            D,
            StructureMatrix.zeros(4, Orientation.ROWS),
            StructureMatrix.zeros(3, Orientation.COLUMNS),
            model,
            hp,
        )
        skipped = update_coeffs(ws)
        assert skipped == 2 * 3
        assert np.all(ws.coeffs == 0.0)


class TestUpdateBasis:
    def test_objective_non_increasing(self):
        rng = np.random.default_rng(20)
        for _ in range(10):
            D, S, T, model, hp = random_setup(rng)
            ws = SolverWorkspace(D, S, T, model, hp)
            before = ws.objective_value()
            update_basis(ws)
            after = ws.objective_value()
            assert after <= before + 1e-10 * abs(before)

    def test_columns_stay_in_unit_ball(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            D, S, T, model, hp = random_setup(rng)
            ws = SolverWorkspace(D, S, T, model, hp)
            update_basis(ws)
            assert np.linalg.norm(ws.basis, axis=0).max() <= 1.0 + 1e-12

    def test_zero_coeffs_zero_penalty_skips_everything(self):
        D = TaggingMatrix.from_dense(np.ones((5, 4)))
        hp = Hyperparams(K=3, knn_k=2, gamma=0.0)
        rng = np.random.default_rng(22)
        U = rng.normal(size=(5, 3))
        U /= np.linalg.norm(U, axis=0, keepdims=True)
        model = FactorModel(
            U=U, V=sp.csr_matrix((3, 4)), E=sp.csr_matrix((5, 4))
        )
        ws = SolverWorkspace(
            D,
            StructureMatrix.zeros(5, Orientation.ROWS),
            StructureMatrix.zeros(4, Orientation.COLUMNS),
            model,
            hp,
        )
        before = ws.basis.copy()
        skipped = update_basis(ws)
        assert skipped == 5 * 3
        np.testing.assert_array_equal(ws.basis, before)

    def test_single_coordinate_scalar_case(self):
        # N=1, K=1, no image penalty: minimizer is Q/(VV') clipped to [-1, 1]
        rng = np.random.default_rng(23)
        for _ in range(20):
            v = rng.normal(size=(1, 3))
            d = rng.normal(size=(1, 3))
            hp = Hyperparams(K=1, knn_k=1, gamma=0.0, eta=0.1)
            model = FactorModel(
                U=np.zeros((1, 1)), V=sp.csr_matrix(v), E=sp.csr_matrix((1, 3))
            )
            ws = SolverWorkspace(
                TaggingMatrix.from_dense(d),
                StructureMatrix.zeros(1, Orientation.ROWS),
                StructureMatrix.zeros(3, Orientation.COLUMNS),
                model,
                hp,
            )
            update_basis(ws)
            q = float(v[0] @ d[0])
            denom = float(v[0] @ v[0])
            want = np.clip(q / denom, -1.0, 1.0)
            np.testing.assert_allclose(ws.basis[0, 0], want, atol=1e-12)

            def f(u):
                return denom * u * u - 2.0 * q * u

            _, best = scalar_min_by_search(f, radius=1.0)
            assert f(ws.basis[0, 0]) <= best + 1e-6


class TestUpdateError:
    def test_closed_form_is_global_minimum(self):
        rng = np.random.default_rng(30)
        D, S, T, model, hp = random_setup(rng)
        ws = SolverWorkspace(D, S, T, model, hp)
        update_error(ws)
        after = ws.objective_value()
        # any other E does no better
        for _ in range(20):
            other = ws.error + rng.normal(scale=0.3, size=ws.error.shape)
            val = dense_objective(
                D.to_dense(), S.matrix.toarray(), T.matrix.toarray(),
                ws.basis, ws.coeffs, other, hp,
            )
            assert val >= after - 1e-9

    def test_matches_elementwise_lasso(self):
        rng = np.random.default_rng(31)
        beta = 0.8
        for r in rng.normal(scale=1.5, size=40):
            problem = LassoProblem(
                gram=np.array([[1.0]]),
                corr=np.array([r]),
                target_sq_norm=float(r * r),
                l1_weight=beta,
            )
            w = solve_lasso(problem, tol=1e-12).weights[0]
            np.testing.assert_allclose(
                float(error_update_value(r, beta)), w, atol=1e-10
            )

    def test_refreshes_target(self):
        rng = np.random.default_rng(32)
        D, S, T, model, hp = random_setup(rng)
        ws = SolverWorkspace(D, S, T, model, hp)
        update_error(ws)
        np.testing.assert_allclose(ws.target, ws.data - ws.error, atol=0)


class TestFit:
    def test_zero_data_converges_immediately(self):
        D = TaggingMatrix.from_dense(np.zeros((5, 4)))
        hp = Hyperparams(K=2, knn_k=2)
        report = fit(
            D,
            StructureMatrix.zeros(5, Orientation.ROWS),
            StructureMatrix.zeros(4, Orientation.COLUMNS),
            hp,
        )
        assert report.converged
        assert report.iterations == 1
        assert report.objective_trace[1] == 0.0
        assert report.objective_trace[-1] == 0.0
        assert report.model.V.nnz == 0
        assert report.model.E.nnz == 0

    def test_trace_non_increasing_with_defaults(self):
        rng = np.random.default_rng(40)
        D, S, T, _, _ = random_setup(rng, n=30, m=12, k=4)
        hp = Hyperparams(K=4, knn_k=3, max_outer_iters=200)
        report = fit(D, S, T, hp)
        assert report.iterations <= 200
        trace = report.objective_trace
        for prev, cur in zip(trace, trace[1:]):
            assert cur <= prev + 1e-10 * abs(prev)

    def test_block_trace_chain_monotone(self):
        rng = np.random.default_rng(41)
        D, S, T, _, _ = random_setup(rng, n=20, m=10, k=3)
        hp = Hyperparams(K=3, knn_k=3, max_outer_iters=50)
        report = fit(D, S, T, hp)
        chain = [report.objective_trace[0]]
        for row in report.block_trace:
            chain.extend(row)
        for prev, cur in zip(chain, chain[1:]):
            assert cur <= prev + 1e-10 * abs(prev)

    def test_final_model_validates_and_matches_trace(self):
        rng = np.random.default_rng(42)
        D, S, T, _, _ = random_setup(rng, n=15, m=8, k=3)
        hp = Hyperparams(K=3, knn_k=3, max_outer_iters=30)
        report = fit(D, S, T, hp)
        report.model.validate()
        np.testing.assert_allclose(
            objective(D, S, T, report.model, hp),
            report.objective_trace[-1],
            rtol=1e-12,
        )

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(43)
        D, S, T, _, _ = random_setup(rng, n=12, m=6, k=2)
        hp = Hyperparams(K=2, knn_k=3, max_outer_iters=20, rng_seed=7)
        a = fit(D, S, T, hp)
        b = fit(D, S, T, hp)
        np.testing.assert_array_equal(a.objective_trace, b.objective_trace)
        np.testing.assert_array_equal(a.model.U, b.model.U)
        assert (a.model.V != b.model.V).nnz == 0

    def test_seed_changes_padding_columns(self):
        # K above the number of singular directions: the pad is seeded random
        D = TaggingMatrix.from_dense(np.eye(4))
        m1 = initial_model(D, Hyperparams(K=6, knn_k=2, rng_seed=1))
        m2 = initial_model(D, Hyperparams(K=6, knn_k=2, rng_seed=2))
        np.testing.assert_allclose(m1.U[:, :4], m2.U[:, :4], atol=1e-12)
        assert np.abs(m1.U[:, 4:] - m2.U[:, 4:]).max() > 1e-6

    def test_initial_model_contract(self):
        rng = np.random.default_rng(9)
        D = TaggingMatrix.from_dense((rng.random((6, 5)) < 0.4).astype(float))
        hp = Hyperparams(K=3, knn_k=2, rng_seed=0)
        model = initial_model(D, hp)
        np.testing.assert_allclose(np.linalg.norm(model.U, axis=0), 1.0, atol=1e-12)
        assert model.V.nnz == 0
        assert model.E.nnz == 0
        # basis spans the top singular directions of the input
        left, _, _ = np.linalg.svd(D.to_dense(), full_matrices=False)
        overlap = np.abs(left[:, :3].T @ model.U)
        np.testing.assert_allclose(np.diag(overlap), 1.0, atol=1e-10)

    def test_initial_model_deterministic(self):
        D = TaggingMatrix.from_dense(np.eye(5))
        hp = Hyperparams(K=3, knn_k=2, rng_seed=0)
        m1 = initial_model(D, hp)
        m2 = initial_model(D, hp)
        np.testing.assert_array_equal(m1.U, m2.U)

    def test_blowup_raises_with_trace(self):
        rng = np.random.default_rng(44)
        D, S, T, model, hp = random_setup(rng, n=6, m=4, k=2)
        huge = FactorModel(
            U=model.U,
            V=sp.csr_matrix(np.full((2, 4), 1e308)),
            E=sp.csr_matrix((6, 4)),
        )
        with pytest.raises(NumericalBlowupError) as exc:
            fit(D, S, T, hp.with_overrides(K=2), start=huge)
        assert len(exc.value.trace) >= 1

    def test_respects_inner_sweeps(self):
        rng = np.random.default_rng(45)
        D, S, T, _, _ = random_setup(rng, n=10, m=6, k=2)
        hp = Hyperparams(K=2, knn_k=3, inner_sweeps=3, max_outer_iters=10)
        report = fit(D, S, T, hp)
        for prev, cur in zip(report.objective_trace, report.objective_trace[1:]):
            assert cur <= prev + 1e-10 * abs(prev)
