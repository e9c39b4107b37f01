import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_rotation, ring_scene
from mapfuse.bundle import (
    BundleOptions,
    BundleReport,
    adjust_with_fixed_points,
    assemble_jacobian,
    assemble_residuals,
    bundle_adjust,
    gradient_norm,
)
from mapfuse.errors import NotEnoughObservations
from mapfuse.geometry import (
    CameraPose,
    Observation,
    Point3,
    SceneMap,
    SimilarityTransform,
    apply_camera_update,
    apply_similarity_to_map,
)


def perturb_map(smap, rng, magnitude):
    """Random local-chart perturbation of every camera and point."""
    R = smap.rotations().copy()
    t = smap.translations().copy()
    X = smap.coordinates() + rng.normal(0, magnitude, (smap.n_points, 3))
    cams = []
    for i in range(smap.n_cameras):
        delta = rng.normal(0, magnitude, 6)
        cams.append(apply_camera_update(CameraPose(R[i], t[i]), delta))
    return smap.with_parameters(
        np.stack([c.rotation for c in cams]),
        np.stack([c.translation for c in cams]),
        X,
    )


def finite_difference_jacobian(smap, h=1e-6):
    """Central-difference derivative of the stacked residuals with respect
    to the local parameters, as a dense matrix (independent oracle)."""
    m, n = smap.n_cameras, smap.n_points
    J = np.zeros((2 * smap.n_observations, 6 * m + 3 * n))
    R0, t0, X0 = smap.rotations(), smap.translations(), smap.coordinates()

    def stacked(R, t, X):
        probe = smap.with_parameters(R, t, X)
        return assemble_residuals(probe)

    for i in range(m):
        for a in range(6):
            delta = np.zeros(6)
            delta[a] = h
            plus = apply_camera_update(CameraPose(R0[i], t0[i]), delta)
            minus = apply_camera_update(CameraPose(R0[i], t0[i]), -delta)
            Rp, tp = R0.copy(), t0.copy()
            Rp[i], tp[i] = plus.rotation, plus.translation
            rp = stacked(Rp, tp, X0)
            Rm, tm = R0.copy(), t0.copy()
            Rm[i], tm[i] = minus.rotation, minus.translation
            rm = stacked(Rm, tm, X0)
            J[:, 6 * i + a] = (rp - rm) / (2 * h)
    for j in range(n):
        for a in range(3):
            Xp, Xm = X0.copy(), X0.copy()
            Xp[j, a] += h
            Xm[j, a] -= h
            J[:, 6 * m + 3 * j + a] = (stacked(R0, t0, Xp) - stacked(R0, t0, Xm)) / (
                2 * h
            )
    return J


class TestAssembleResiduals:
    def test_noiseless_map_has_zero_residuals(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=3, n_points=8)
        assert_allclose(assemble_residuals(smap), 0, atol=1e-12)

    def test_single_observation_offset(self):
        cam = CameraPose(np.eye(3), np.zeros(3))
        pt = Point3(np.array([1.0, 2.0, 2.0]), 0)
        obs = Observation(0, 0, np.array([0.45, 1.02]))
        smap = SceneMap([cam], [pt], [obs])
        assert_allclose(assemble_residuals(smap), [0.05, -0.02], atol=1e-14)

    def test_noise_level_matches_chi_square_expectation(self, rng):
        sigma = 0.05
        smap, *_ = ring_scene(rng, n_cameras=10, n_points=100, sigma=sigma)
        r = assemble_residuals(smap)
        expected = sigma**2 * r.size
        assert abs(float(r @ r) - expected) < 0.10 * expected


class TestAssembleJacobian:
    def test_matches_finite_differences(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=3, n_points=10, sigma=0.01)
        J = assemble_jacobian(smap).toarray()
        J_fd = finite_difference_jacobian(smap)
        scale = np.abs(J_fd).max()
        assert np.abs(J - J_fd).max() <= 1e-4 * scale

    def test_unobserved_pairs_have_zero_blocks(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=10, visibility=0.6)
        J = assemble_jacobian(smap).toarray()
        m = smap.n_cameras
        seen = {
            (o.camera_index, o.point_index) for o in smap.observations
        }
        for row_obs, obs in enumerate(smap.observations):
            for cam in range(m):
                if cam != obs.camera_index:
                    block = J[2 * row_obs : 2 * row_obs + 2, 6 * cam : 6 * cam + 6]
                    assert np.all(block == 0)
        assert len(seen) == smap.n_observations

    def test_point_block_at_unit_depth(self):
        cam = CameraPose(np.eye(3), np.zeros(3))
        pt = Point3(np.array([0.0, 0.0, 1.0]), 0)
        obs = Observation(0, 0, np.array([0.0, 0.0]))
        smap = SceneMap([cam], [pt], [obs])
        J = assemble_jacobian(smap).toarray()
        block = J[0:2, 6:9]
        assert_allclose(block, [[1, 0, 0], [0, 1, 0]], atol=1e-14)


class TestBundleAdjust:
    def test_recovers_noiseless_optimum(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=20)
        noisy = perturb_map(smap, rng, 1e-3)
        opts = BundleOptions(max_iterations=200, gradient_norm_tolerance=1e-12)
        out, report = bundle_adjust(noisy, opts)
        assert report.squared_residual <= 1e-16

    def test_residual_expectation_with_noise(self, rng):
        sigma = 0.05
        m, n = 10, 100
        vals = []
        for seed in range(40):
            local = np.random.default_rng(seed)
            smap, *_ = ring_scene(local, n_cameras=m, n_points=n, sigma=sigma)
            out, report = bundle_adjust(smap)
            k = smap.n_observations
            vals.append(report.squared_residual)
        expected = sigma**2 * (2 * m * n - (6 * m + 3 * n - 7))
        mean = np.mean(vals)
        assert abs(mean - expected) < 0.15 * expected

    def test_idempotent_at_optimum(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=5, n_points=30, sigma=0.02)
        once, r1 = bundle_adjust(smap)
        twice, r2 = bundle_adjust(once)
        assert abs(r2.squared_residual - r1.squared_residual) <= max(
            1e-12 * r1.squared_residual, 1e-300
        )

    def test_gauge_indifference(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=5, n_points=30, sigma=0.02)
        T = SimilarityTransform(1.8, random_rotation(rng), rng.normal(size=3))
        _, r_a = bundle_adjust(smap)
        _, r_b = bundle_adjust(apply_similarity_to_map(smap, T))
        assert abs(r_a.squared_residual - r_b.squared_residual) < (
            1e-9 * r_a.squared_residual
        )

    def test_rejects_underconstrained_input(self):
        cam = CameraPose(np.eye(3), np.zeros(3))
        pt = Point3(np.array([0.0, 0.0, 1.0]), 0)
        obs = Observation(0, 0, np.array([0.0, 0.0]))
        with pytest.raises(NotEnoughObservations):
            bundle_adjust(SceneMap([cam], [pt], [obs]))

    def test_report_fields(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=15, sigma=0.01)
        _, report = bundle_adjust(smap)
        assert isinstance(report, BundleReport)
        assert report.converged
        assert report.gradient_norm <= BundleOptions().gradient_norm_tolerance
        assert report.iterations > 0


class TestGradientNorm:
    def test_zero_at_noiseless_ground_truth(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=12)
        assert gradient_norm(smap) <= 1e-12

    def test_below_tolerance_after_convergence(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=15, sigma=0.01)
        opts = BundleOptions(gradient_norm_tolerance=1e-9)
        out, report = bundle_adjust(smap, opts)
        assert report.converged
        assert gradient_norm(out) <= 1e-9

    def test_matches_finite_difference_gradient(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=3, n_points=10, sigma=0.05)
        J = finite_difference_jacobian(smap)
        r = assemble_residuals(smap)
        fd = 2 * J.T @ r
        assert abs(gradient_norm(smap) - np.linalg.norm(fd)) <= 1e-4 * max(
            np.linalg.norm(fd), 1.0
        )


class TestFixedPointAdjustment:
    def test_fixed_points_do_not_move(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=20, sigma=0.02)
        fixed_ids = [0, 3, 7, 11]
        fixed_rows = [smap.point_index_of(i) for i in fixed_ids]
        before = smap.coordinates()[fixed_rows]
        out, report = adjust_with_fixed_points(smap, fixed_ids)
        after = out.coordinates()[fixed_rows]
        assert_allclose(after, before, rtol=0, atol=0)
        assert report.squared_residual <= float(
            assemble_residuals(smap) @ assemble_residuals(smap)
        )

    def test_all_points_fixed_moves_cameras_only(self, rng):
        smap, *_ = ring_scene(rng, n_cameras=4, n_points=20, sigma=0.02)
        out, _ = adjust_with_fixed_points(smap, list(range(20)))
        assert_allclose(out.coordinates(), smap.coordinates(), atol=0)
