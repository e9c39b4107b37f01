"""Tests for footprint compression.

Oracles: hand-computed normal-equation solves for the sensitivity
matrix, re-optimization of the auxiliary parameters via
adjust_with_fixed_points as the ground truth for first-order recovery
and for the quadratic cost model, and exact similarity invariance of
reprojection for the gauge rows.
"""

import numpy as np
import pytest

from conftest import ring_scene

from mapfuse.bundle import (
    BundleOptions,
    adjust_with_fixed_points,
    assemble_residuals,
    bundle_adjust,
)
from mapfuse.compress import (
    CompressedMap,
    aux_sensitivity,
    compress_map,
    eval_compressed,
    gauge_generators,
    recover_aux,
    reduced_jacobian,
)
from mapfuse.errors import (
    DegenerateAnchors,
    NoRecoveryData,
    NotConverged,
    SingularAuxiliary,
)
from mapfuse.geometry import SimilarityTransform, apply_similarity_to_map

TIGHT = BundleOptions(gradient_norm_tolerance=1e-8, max_iterations=300)


def stacked_parameters(smap):
    return np.concatenate(
        [
            np.asarray(smap.rotations()).ravel(),
            np.asarray(smap.translations()).ravel(),
            np.asarray(smap.coordinates()).ravel(),
        ]
    )


def displace_anchors(smap, anchor_pts, q_new):
    coords = np.array(smap.coordinates())
    coords[anchor_pts] = np.asarray(q_new).reshape(-1, 3)
    return smap.with_parameters(
        smap.rotations(), smap.translations(), coords
    )


@pytest.fixture(scope="module")
def optimized():
    rng = np.random.default_rng(2024)
    raw, *_ = ring_scene(rng, n_cameras=6, n_points=40, sigma=0.02)
    smap, report = bundle_adjust(raw, TIGHT)
    assert report.converged
    anchor_ids = [int(t) for t in smap.track_ids()[:10]]
    return smap, anchor_ids


@pytest.fixture(scope="module")
def footprint(optimized):
    smap, anchor_ids = optimized
    return compress_map(smap, anchor_ids, with_recovery=True)


class TestAuxSensitivity:
    def test_no_coupling_gives_zero(self):
        J_a = np.zeros((6, 9))
        J_b = np.array(
            [[2.0, 0.0], [0.0, 3.0], [0.0, 0.0], [1.0, 1.0], [0.0, 2.0], [1.0, 0.0]]
        )
        dsdq = aux_sensitivity(J_a, J_b)
        assert dsdq.shape == (2, 9)
        assert np.all(dsdq == 0.0)

    def test_hand_computed_diagonal_solve(self):
        # J_b^T J_b = diag(4, 9); J_b^T J_a = [2, 3]^T
        J_b = np.array([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
        J_a = np.array([[1.0], [1.0], [5.0]])
        dsdq = aux_sensitivity(J_a, J_b)
        assert np.allclose(dsdq, [[-2.0 / 4.0], [-3.0 / 9.0]], atol=1e-12)

    def test_singular_auxiliary_block_rejected(self):
        J_b = np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])
        J_a = np.ones((3, 1))
        with pytest.raises(SingularAuxiliary):
            aux_sensitivity(J_a, J_b)

    def test_first_order_match_against_reoptimization(self):
        # The sensitivity matrix comes from the normal equations without
        # the residual-curvature term, so its first-order accuracy is
        # noise-limited; use a quiet map to probe the linearization
        # itself.
        rng = np.random.default_rng(2024)
        raw, *_ = ring_scene(rng, n_cameras=6, n_points=40, sigma=1e-4)
        deep = BundleOptions(gradient_norm_tolerance=1e-11, max_iterations=400)
        smap, report = bundle_adjust(raw, deep)
        assert report.converged
        anchor_ids = [int(t) for t in smap.track_ids()[:10]]
        cmap = compress_map(smap, anchor_ids, with_recovery=True)
        anchor_pts = cmap.recovery.anchor_point_indices

        rng = np.random.default_rng(5)
        delta = rng.standard_normal(cmap.q0.size)
        delta *= 1e-4 / np.linalg.norm(delta)
        q_new = cmap.q0 + delta

        predicted = recover_aux(cmap, q_new)
        oracle, rep = adjust_with_fixed_points(
            displace_anchors(smap, anchor_pts, q_new), anchor_ids, deep
        )
        assert rep.converged
        base = stacked_parameters(smap)
        err = np.linalg.norm(
            stacked_parameters(predicted) - stacked_parameters(oracle)
        )
        moved = np.linalg.norm(stacked_parameters(oracle) - base)
        assert moved > 0
        assert err <= 10.0 * 1e-4 * moved


class TestReducedJacobian:
    def test_zero_auxiliary_block_passthrough(self):
        J_a = np.arange(12.0).reshape(4, 3)
        J_b = np.zeros((4, 5))
        J_q = reduced_jacobian(J_a, J_b, np.zeros((5, 3)))
        assert np.array_equal(J_q, J_a)

    def test_residual_orthogonal_at_optimum(self, optimized):
        smap, anchor_ids = optimized
        J_a, J_b = _partitioned_jacobian(smap, anchor_ids)
        J_q = reduced_jacobian(J_a, J_b, aux_sensitivity(J_a, J_b))
        r = assemble_residuals(smap)
        bound = 1e-8 * np.linalg.norm(r) * np.linalg.norm(J_q)
        assert np.linalg.norm(r @ J_q) <= bound

    def test_seven_dimensional_nullspace(self, optimized):
        smap, anchor_ids = optimized
        J_a, J_b = _partitioned_jacobian(smap, anchor_ids)
        J_q = reduced_jacobian(J_a, J_b, aux_sensitivity(J_a, J_b))
        sv = np.linalg.svd(J_q, compute_uv=False)
        assert sv[-7] < 1e-6 * sv[0]
        assert sv[-8] > 1e-6 * sv[0]


def _partitioned_jacobian(smap, anchor_ids):
    from mapfuse.bundle import assemble_jacobian

    J = assemble_jacobian(smap).toarray()
    m = smap.n_cameras
    anchor_pts = np.array([smap.point_index_of(t) for t in anchor_ids])
    a_cols = (6 * m + 3 * anchor_pts[:, None] + np.arange(3)).ravel()
    b_cols = np.setdiff1d(np.arange(J.shape[1]), a_cols)
    return J[:, a_cols], J[:, b_cols]


class TestGaugeGenerators:
    def test_rows_orthonormal(self, rng):
        q0 = rng.standard_normal(15)
        G = gauge_generators(q0)
        assert G.shape == (7, 15)
        assert np.allclose(G @ G.T, np.eye(7), atol=1e-12)

    def test_translation_rows_move_anchors_equally(self, rng):
        q0 = rng.standard_normal(18)
        G = gauge_generators(q0)
        for i in range(3):
            steps = G[i].reshape(-1, 3)
            assert np.allclose(steps, steps[0], atol=1e-12)

    def test_scaling_row_survives_for_centered_anchors(self, rng):
        X = rng.standard_normal((6, 3))
        X -= X.mean(axis=0)
        q0 = X.ravel()
        G = gauge_generators(q0)
        expected = q0 / np.linalg.norm(q0)
        agreement = abs(G[6] @ expected)
        assert agreement == pytest.approx(1.0, abs=1e-12)

    def test_collinear_anchors_degenerate(self):
        q0 = np.array([[i, 0.0, 0.0] for i in range(5)]).ravel()
        with pytest.raises(DegenerateAnchors):
            gauge_generators(q0)

    def test_too_few_anchors_rejected(self):
        with pytest.raises(ValueError):
            gauge_generators(np.ones(6))


class TestCompressMap:
    def test_scalar_equals_residual_norm(self, optimized, footprint):
        smap, _ = optimized
        r = assemble_residuals(smap)
        assert footprint.a == pytest.approx(np.linalg.norm(r), abs=1e-12)

    def test_triangular_shape_for_ten_anchors(self, footprint):
        assert footprint.R.shape == (30, 30)
        assert np.all(np.tril(footprint.R, -1) == 0.0)

    def test_information_matrix_positive_definite(self, footprint):
        evals = np.linalg.eigvalsh(footprint.R.T @ footprint.R)
        assert evals[0] > 0

    def test_raw_triangular_factor_rank_deficiency_is_exactly_seven(
        self, optimized
    ):
        smap, anchor_ids = optimized
        J_a, J_b = _partitioned_jacobian(smap, anchor_ids)
        J_q = reduced_jacobian(J_a, J_b, aux_sensitivity(J_a, J_b))
        R_raw = np.linalg.qr(J_q, mode="r")
        sv = np.linalg.svd(R_raw, compute_uv=False)
        assert sv[-7] < 1e-6 * sv[0]
        assert sv[-8] > 1e-6 * sv[0]

    def test_bookkeeping_counts(self, optimized, footprint):
        smap, anchor_ids = optimized
        assert footprint.eta_res == 2 * smap.n_observations
        assert (
            footprint.d_dof
            == 6 * smap.n_cameras + 3 * smap.n_points - 7
        )
        assert footprint.anchor_ids == tuple(anchor_ids)

    def test_unconverged_map_rejected(self, rng):
        raw, *_ = ring_scene(rng, n_cameras=4, n_points=15, sigma=0.05)
        ids = [int(t) for t in raw.track_ids()[:5]]
        with pytest.raises(NotConverged):
            compress_map(raw, ids)
        cmap = compress_map(raw, ids, check_convergence=False)
        assert cmap.R.shape == (15, 15)

    def test_gauge_motion_penalized_but_artificial(self, optimized, footprint):
        smap, _ = optimized
        shift = np.array([1e-3, -2e-3, 0.5e-3])
        T = SimilarityTransform(1.0, np.eye(3), shift)
        moved = apply_similarity_to_map(smap, T)
        r0 = assemble_residuals(smap)
        r1 = assemble_residuals(moved)
        assert abs(r1 @ r1 - r0 @ r0) < 1e-9  # true cost is unchanged

        q_shifted = (footprint.anchor_coordinates() + shift).ravel()
        _, cost = eval_compressed(footprint, q_shifted)
        assert cost - footprint.a**2 > 0  # the model charges for it

    def test_quadratic_fidelity_off_gauge(self, optimized, footprint):
        smap, anchor_ids = optimized
        anchor_pts = footprint.recovery.anchor_point_indices
        G = gauge_generators(footprint.q0)
        rng = np.random.default_rng(11)
        delta = rng.standard_normal(footprint.q0.size)
        delta -= G.T @ (G @ delta)
        delta *= 1e-3 * np.linalg.norm(footprint.q0) / np.linalg.norm(delta)
        q_new = footprint.q0 + delta

        _, model_cost = eval_compressed(footprint, q_new)
        oracle, rep = adjust_with_fixed_points(
            displace_anchors(smap, anchor_pts, q_new), anchor_ids, TIGHT
        )
        assert rep.converged
        true_cost = rep.squared_residual
        assert abs(model_cost - true_cost) / true_cost <= 0.01

    def test_model_error_shrinks_linearly_with_step(self, optimized, footprint):
        smap, anchor_ids = optimized
        anchor_pts = footprint.recovery.anchor_point_indices
        G = gauge_generators(footprint.q0)
        rng = np.random.default_rng(3)
        direction = rng.standard_normal(footprint.q0.size)
        direction -= G.T @ (G @ direction)
        direction /= np.linalg.norm(direction)

        rel_errors = {}
        for eps in (1e-3, 1e-2):
            q_new = footprint.q0 + eps * direction
            _, model_cost = eval_compressed(footprint, q_new)
            oracle, rep = adjust_with_fixed_points(
                displace_anchors(smap, anchor_pts, q_new), anchor_ids, TIGHT
            )
            assert rep.converged
            rel_errors[eps] = (
                abs(model_cost - rep.squared_residual) / rep.squared_residual
            )
        C = 5.0
        for eps, rel in rel_errors.items():
            assert rel <= C * eps
        assert rel_errors[1e-3] < rel_errors[1e-2]

    def test_missing_anchor_id_rejected(self, optimized):
        smap, _ = optimized
        with pytest.raises(KeyError):
            compress_map(smap, [999999, 0, 1])


class TestEvalCompressed:
    def test_at_origin_returns_scalar_only(self, footprint):
        r_hat, cost = eval_compressed(footprint, footprint.q0)
        assert r_hat.shape == (1 + footprint.q0.size,)
        assert r_hat[0] == footprint.a
        assert np.all(r_hat[1:] == 0.0)
        assert cost == pytest.approx(footprint.a**2, rel=1e-15)

    def test_quadratic_form_identity(self, footprint, rng):
        dq = rng.standard_normal(footprint.q0.size) * 1e-2
        r_hat, cost = eval_compressed(footprint, footprint.q0 + dq)
        expected = footprint.a**2 + dq @ (footprint.R.T @ footprint.R) @ dq
        assert cost == pytest.approx(expected, rel=1e-12)
        assert cost == pytest.approx(r_hat @ r_hat, rel=1e-12)

    def test_wrong_length_rejected(self, footprint):
        with pytest.raises(ValueError):
            eval_compressed(footprint, np.zeros(footprint.q0.size + 3))


class TestRecoverAux:
    def test_identity_update_is_noop(self, optimized, footprint):
        smap, _ = optimized
        recovered = recover_aux(footprint, footprint.q0)
        assert np.allclose(
            stacked_parameters(recovered), stacked_parameters(smap), atol=1e-15
        )

    def test_structure_preserved(self, footprint, rng):
        dq = rng.standard_normal(footprint.q0.size) * 1e-4
        recovered = recover_aux(footprint, footprint.q0 + dq)
        base = footprint.recovery.base
        assert recovered.n_cameras == base.n_cameras
        assert recovered.n_points == base.n_points
        assert recovered.n_observations == base.n_observations

    def test_near_optimal_cost_after_recovery(self, optimized, footprint):
        smap, anchor_ids = optimized
        anchor_pts = footprint.recovery.anchor_point_indices
        rng = np.random.default_rng(17)
        dq = rng.standard_normal(footprint.q0.size)
        dq *= 1e-3 / np.linalg.norm(dq)
        q_new = footprint.q0 + dq

        recovered = recover_aux(footprint, q_new)
        r_rec = assemble_residuals(recovered)
        _, rep = adjust_with_fixed_points(
            displace_anchors(smap, anchor_pts, q_new), anchor_ids, TIGHT
        )
        assert rep.converged
        assert r_rec @ r_rec <= 1.1 * rep.squared_residual

    def test_without_recovery_data(self, optimized):
        smap, anchor_ids = optimized
        cmap = compress_map(smap, anchor_ids, with_recovery=False)
        assert cmap.recovery is None
        with pytest.raises(NoRecoveryData):
            recover_aux(cmap, cmap.q0)


class TestCompressedMapInvariants:
    def test_rejects_lower_triangular_leak(self):
        R = np.eye(9)
        R[3, 0] = 0.5
        with pytest.raises(ValueError):
            CompressedMap(
                anchor_ids=(1, 2, 3),
                q0=np.zeros(9),
                a=1.0,
                R=R,
                eta_res=10,
                d_dof=5,
            )

    def test_rejects_too_few_anchors(self):
        with pytest.raises(ValueError):
            CompressedMap(
                anchor_ids=(1, 2),
                q0=np.zeros(6),
                a=1.0,
                R=np.eye(6),
                eta_res=10,
                d_dof=5,
            )

    def test_rejects_negative_scalar(self):
        with pytest.raises(ValueError):
            CompressedMap(
                anchor_ids=(1, 2, 3),
                q0=np.zeros(9),
                a=-0.5,
                R=np.eye(9),
                eta_res=10,
                d_dof=5,
            )

    def test_immutable_arrays(self, footprint):
        with pytest.raises(ValueError):
            footprint.q0[0] = 1.0
        with pytest.raises(ValueError):
            footprint.R[0, 0] = 1.0
