"""Bundle adjustment over a SceneMap.

Residual stacking, the sparse reprojection Jacobian with respect to the
local parameters (6 per camera, 3 per point), and a Levenberg-Marquardt
optimizer with gradient-norm termination.  The normal equations are solved
by eliminating the point blocks, which keeps the dense factorization at
6m x 6m regardless of the point count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import ChiralityError, NotEnoughObservations, NumericalFailure
from .geometry import SceneMap, axis_angle_to_matrix, nearest_rotation

__all__ = [
    "BundleOptions",
    "BundleReport",
    "assemble_residuals",
    "assemble_jacobian",
    "bundle_adjust",
    "adjust_with_fixed_points",
    "gradient_norm",
]

_MIN_DEPTH = 1e-12
_MAX_DAMPING = 1e12
_DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class BundleOptions:
    """Optimizer knobs for bundle_adjust and the merge optimizer."""

    max_iterations: int = 100
    gradient_norm_tolerance: float = 1e-8
    initial_damping: float = 1e-3
    damping_up_factor: float = 10.0
    damping_down_factor: float = 10.0

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.gradient_norm_tolerance < 0:
            raise ValueError("gradient_norm_tolerance must be nonnegative")
        if self.initial_damping <= 0:
            raise ValueError("initial_damping must be positive")
        if self.damping_up_factor <= 1 or self.damping_down_factor <= 1:
            raise ValueError("damping factors must exceed 1")


@dataclass(frozen=True)
class BundleReport:
    """Exit state of an adjustment run."""

    squared_residual: float
    gradient_norm: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if self.squared_residual < 0:
            raise ValueError("squared_residual must be nonnegative")


def _skew_batch(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


class _StalledStep(Exception):
    """Internal: the trial step could not be computed at this damping."""


class _Engine:
    """Vectorized residual/derivative engine bound to one map structure.

    Parameters are held as stacked arrays; the observation bookkeeping
    (accumulation orders, scatter layout for the camera-system reduction)
    is computed once at construction.
    """

    def __init__(self, smap: SceneMap, free_point_mask=None):
        self.R = np.array(smap.rotations())
        self.t = np.array(smap.translations())
        self.X = np.array(smap.coordinates())
        self.cam = np.array(smap.camera_indices())
        self.pt = np.array(smap.point_indices())
        self.uv = np.array(smap.image_points())
        self.m = self.R.shape[0]
        self.n = self.X.shape[0]
        self.k = self.cam.shape[0]

        if free_point_mask is None:
            free_point_mask = np.ones(self.n, dtype=bool)
        self.free = np.asarray(free_point_mask, dtype=bool)

        empty = np.empty(0, dtype=np.int64)

        # Observations of free points, sorted by point: segments for the
        # per-point accumulations.
        fobs = np.flatnonzero(self.free[self.pt])
        fobs = fobs[np.argsort(self.pt[fobs], kind="stable")]
        self.fobs = fobs
        self.fcam = self.cam[fobs]
        self.fpt = self.pt[fobs]
        if fobs.size:
            seg_change = np.flatnonzero(np.diff(self.fpt)) + 1
            self.seg_starts = np.concatenate([[0], seg_change])
            self.seg_pts = self.fpt[self.seg_starts]
        else:
            self.seg_starts = empty
            self.seg_pts = empty

        # Duplicate (camera, point) pairs must be summed before being
        # scattered into the reduction matrix.
        key = self.fcam * self.n + self.fpt
        uniq, inverse = np.unique(key, return_inverse=True)
        self.has_duplicate_pairs = uniq.size < key.size
        if self.has_duplicate_pairs:
            self.dup_perm = np.argsort(key, kind="stable")
            sk = key[self.dup_perm]
            self.dup_starts = np.concatenate(
                [[0], np.flatnonzero(np.diff(sk)) + 1]
            )
            dk = sk[self.dup_starts]
            self.ucam = dk // self.n
            self.upt = dk % self.n

        # All observations sorted by camera (camera accumulations).
        self.cam_perm = np.argsort(self.cam, kind="stable")
        sorted_cam = self.cam[self.cam_perm]
        if self.k:
            cs = np.concatenate([[0], np.flatnonzero(np.diff(sorted_cam)) + 1])
            self.cam_starts = cs
            self.cam_groups = sorted_cam[cs]
        else:
            self.cam_starts = empty
            self.cam_groups = empty

        # All observations sorted by point (full gradient).
        self.ptall_perm = np.argsort(self.pt, kind="stable")
        sorted_pt = self.pt[self.ptall_perm]
        if self.k:
            ps = np.concatenate([[0], np.flatnonzero(np.diff(sorted_pt)) + 1])
            self.ptall_starts = ps
            self.ptall_groups = sorted_pt[ps]
        else:
            self.ptall_starts = empty
            self.ptall_groups = empty

    # -- residuals ----------------------------------------------------------

    def camera_coords(self, R, t, X) -> np.ndarray:
        return np.einsum("kij,kj->ki", R[self.cam], X[self.pt]) + t[self.cam]

    def residuals(self, R, t, X, strict: bool = True):
        """Residual array (k, 2); raises on chirality when strict."""
        Xc = self.camera_coords(R, t, X)
        depths = Xc[:, 2]
        if np.any(depths <= _MIN_DEPTH):
            if strict:
                bad = int(np.flatnonzero(depths <= _MIN_DEPTH)[0])
                raise ChiralityError(
                    f"observation {bad} has non-positive depth",
                    observation_index=bad,
                )
            return None, None
        r = Xc[:, :2] / depths[:, None] - self.uv
        return r, Xc

    def blocks(self, R, t, Xc):
        """Per-observation camera (k,2,6) and point (k,2,3) derivative
        blocks of the residual with respect to the local parameters."""
        z = Xc[:, 2]
        iz = 1.0 / z
        dpi = np.zeros((self.k, 2, 3))
        dpi[:, 0, 0] = iz
        dpi[:, 1, 1] = iz
        dpi[:, 0, 2] = -Xc[:, 0] * iz * iz
        dpi[:, 1, 2] = -Xc[:, 1] * iz * iz
        w = Xc - t[self.cam]
        A = np.empty((self.k, 2, 6))
        A[:, :, :3] = np.einsum("kab,kbc->kac", dpi, -_skew_batch(w))
        A[:, :, 3:] = dpi
        B = np.einsum("kab,kbc->kac", dpi, R[self.cam])
        return A, B

    def gradient_parts(self, A, B, r):
        """(g_c (m,6), g_p (n,3)) with g = J^T r over all parameters."""
        gcK = np.einsum("kai,ka->ki", A, r)
        g_c = np.zeros((self.m, 6))
        if self.k:
            sums = np.add.reduceat(gcK[self.cam_perm], self.cam_starts, axis=0)
            g_c[self.cam_groups] = sums
        gpK = np.einsum("kai,ka->ki", B, r)
        g_p = np.zeros((self.n, 3))
        if self.k:
            sums = np.add.reduceat(
                gpK[self.ptall_perm], self.ptall_starts, axis=0
            )
            g_p[self.ptall_groups] = sums
        return g_c, g_p

    # -- damped normal-equation solves ---------------------------------------

    def prepare_normal(self, A, B, r):
        """Damping-independent pieces of the normal equations."""
        f = self.fobs
        Bf, rf = B[f], r[f]

        HccK = np.einsum("kai,kaj->kij", A, A)
        Hcc = np.zeros((self.m, 6, 6))
        gcK = np.einsum("kai,ka->ki", A, r)
        gc = np.zeros((self.m, 6))
        if self.k:
            Hcc[self.cam_groups] = np.add.reduceat(
                HccK[self.cam_perm], self.cam_starts, axis=0
            )
            gc[self.cam_groups] = np.add.reduceat(
                gcK[self.cam_perm], self.cam_starts, axis=0
            )

        Hpp = np.zeros((self.n, 3, 3))
        gp = np.zeros((self.n, 3))
        W = None
        if f.size:
            HppK = np.einsum("kai,kaj->kij", Bf, Bf)
            gpK = np.einsum("kai,ka->ki", Bf, rf)
            Hpp[self.seg_pts] = np.add.reduceat(HppK, self.seg_starts, axis=0)
            gp[self.seg_pts] = np.add.reduceat(gpK, self.seg_starts, axis=0)
            W = np.matmul(A[f].transpose(0, 2, 1), Bf)  # (kf, 6, 3)
        return {"Hcc": Hcc, "gc": gc, "Hpp": Hpp, "gp": gp, "W": W}

    def solve_step(self, pre, lam):
        """Solve (J^T J + lam diag(J^T J)) delta = -J^T r with the point
        blocks eliminated; returns (delta_c (m,6), delta_p (n,3)).

        Raises _StalledStep when a factorization fails at this damping.
        """
        Hcc, gc, Hpp, gp, W = (
            pre["Hcc"],
            pre["gc"],
            pre["Hpp"],
            pre["gp"],
            pre["W"],
        )
        m, n = self.m, self.n

        di = np.arange(6)
        dc = Hcc[:, di, di]
        scale = max(dc.max(initial=0.0), 1.0)
        Hcc_d = Hcc.copy()
        Hcc_d[:, di, di] += lam * np.maximum(dc, _DIAG_FLOOR * scale)

        dj = np.arange(3)
        dp = Hpp[:, dj, dj]
        Hpp_d = Hpp.copy()
        Hpp_d[:, dj, dj] += lam * np.maximum(dp, _DIAG_FLOOR * scale) + (
            _DIAG_FLOOR * scale
        ) * (dp == 0)

        try:
            np.linalg.cholesky(Hpp_d)  # positive-definiteness gate
        except np.linalg.LinAlgError as e:
            raise _StalledStep from e
        P = np.linalg.inv(Hpp_d)
        Cp = np.linalg.cholesky(P)

        S = np.zeros((m, 6, m, 6))
        rhs = gc.copy()
        if W is not None:
            G = np.matmul(W, Cp[self.fpt])  # (kf, 6, 3)
            if self.has_duplicate_pairs:
                Gs = np.add.reduceat(G[self.dup_perm], self.dup_starts, axis=0)
                cam_sc, pt_sc = self.ucam, self.upt
            else:
                Gs, cam_sc, pt_sc = G, self.fcam, self.fpt
            M4 = np.zeros((m, 6, n, 3))
            M4[cam_sc, :, pt_sc, :] = Gs
            Mf = M4.reshape(6 * m, 3 * n)
            S -= (Mf @ Mf.T).reshape(m, 6, m, 6)
            y = np.einsum("kxy,kx->ky", Cp, gp)  # Cp^T g_p per point
            rhs -= (Mf @ y.ravel()).reshape(m, 6)
        S[np.arange(m), :, np.arange(m), :] += Hcc_d
        S = S.reshape(6 * m, 6 * m)

        try:
            cf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
            delta_c = scipy.linalg.cho_solve(
                cf, -rhs.ravel(), check_finite=False
            ).reshape(m, 6)
        except (scipy.linalg.LinAlgError, ValueError) as e:
            raise _StalledStep from e

        delta_p = np.zeros((n, 3))
        if W is not None:
            z = (Mf.T @ delta_c.ravel()).reshape(n, 3)
            delta_p = -np.einsum("kxy,ky->kx", P, gp) - np.einsum(
                "kxy,ky->kx", Cp, z
            )
            delta_p[~self.free] = 0.0
        if not (np.all(np.isfinite(delta_c)) and np.all(np.isfinite(delta_p))):
            raise _StalledStep
        return delta_c, delta_p

    def apply_step(self, R, t, X, delta_c, delta_p):
        R_new = np.empty_like(R)
        for i in range(self.m):
            Ri = axis_angle_to_matrix(delta_c[i, :3]) @ R[i]
            if np.abs(Ri.T @ Ri - np.eye(3)).max() > 1e-12:
                Ri = nearest_rotation(Ri)
            R_new[i] = Ri
        t_new = t + delta_c[:, 3:]
        X_new = X + delta_p
        return R_new, t_new, X_new


# -- public operations --------------------------------------------------------


def assemble_residuals(smap: SceneMap) -> np.ndarray:
    """All reprojection residuals stacked in observation order (2k,)."""
    eng = _Engine(smap)
    r, _ = eng.residuals(eng.R, eng.t, eng.X)
    return r.ravel()


def assemble_jacobian(smap: SceneMap) -> scipy.sparse.csr_matrix:
    """Sparse derivative of the stacked residuals, shape (2k, 6m+3n).

    Columns are ordered cameras first (6 each), then points (3 each);
    each observation row pair carries one camera block and one point
    block.
    """
    eng = _Engine(smap)
    r, Xc = eng.residuals(eng.R, eng.t, eng.X)
    A, B = eng.blocks(eng.R, eng.t, Xc)
    k, m, n = eng.k, eng.m, eng.n

    rows_cam = (2 * np.arange(k))[:, None, None] + np.array([[0], [1]])
    rows_cam = np.broadcast_to(rows_cam, (k, 2, 6))
    cols_cam = (6 * eng.cam)[:, None, None] + np.arange(6)[None, None, :]
    cols_cam = np.broadcast_to(cols_cam, (k, 2, 6))

    rows_pt = (2 * np.arange(k))[:, None, None] + np.array([[0], [1]])
    rows_pt = np.broadcast_to(rows_pt, (k, 2, 3))
    cols_pt = (6 * m + 3 * eng.pt)[:, None, None] + np.arange(3)[None, None, :]
    cols_pt = np.broadcast_to(cols_pt, (k, 2, 3))

    data = np.concatenate([A.ravel(), B.ravel()])
    rows = np.concatenate([rows_cam.ravel(), rows_pt.ravel()])
    cols = np.concatenate([cols_cam.ravel(), cols_pt.ravel()])
    J = scipy.sparse.coo_matrix(
        (data, (rows, cols)), shape=(2 * k, 6 * m + 3 * n)
    )
    return J.tocsr()


def gradient_norm(smap: SceneMap) -> float:
    """Euclidean norm of the gradient of the squared residual, ||2 J^T r||."""
    eng = _Engine(smap)
    r, Xc = eng.residuals(eng.R, eng.t, eng.X)
    A, B = eng.blocks(eng.R, eng.t, Xc)
    g_c, g_p = eng.gradient_parts(A, B, r)
    return 2.0 * float(np.sqrt(np.sum(g_c * g_c) + np.sum(g_p * g_p)))


def _lm_loop(eng: _Engine, opts: BundleOptions, grad_free_only: bool):
    R, t, X = eng.R, eng.t, eng.X
    r, Xc = eng.residuals(R, t, X)  # chirality at the start is an error
    cost = float(np.sum(r * r))
    lam = opts.initial_damping
    iterations = 0
    converged = False
    gnorm = np.inf

    while True:
        A, B = eng.blocks(R, t, Xc)
        g_c, g_p = eng.gradient_parts(A, B, r)
        if grad_free_only:
            g_sq = np.sum(g_c * g_c) + np.sum(g_p[eng.free] ** 2)
        else:
            g_sq = np.sum(g_c * g_c) + np.sum(g_p * g_p)
        gnorm = 2.0 * float(np.sqrt(g_sq))
        if gnorm <= opts.gradient_norm_tolerance:
            converged = True
            break
        if iterations >= opts.max_iterations:
            break

        pre = eng.prepare_normal(A, B, r)
        accepted = False
        solver_failed_at_max = False
        while iterations < opts.max_iterations:
            iterations += 1
            try:
                dc, dp = eng.solve_step(pre, lam)
            except _StalledStep:
                lam *= opts.damping_up_factor
                if lam > _MAX_DAMPING:
                    solver_failed_at_max = True
                    break
                continue
            R_try, t_try, X_try = eng.apply_step(R, t, X, dc, dp)
            r_try, Xc_try = eng.residuals(R_try, t_try, X_try, strict=False)
            if r_try is None:
                cost_try = np.inf  # point crossed behind a camera
            else:
                cost_try = float(np.sum(r_try * r_try))
            if cost_try < cost:
                R, t, X = R_try, t_try, X_try
                r, Xc, cost = r_try, Xc_try, cost_try
                lam = max(lam / opts.damping_down_factor, 1e-12)
                accepted = True
                break
            lam *= opts.damping_up_factor
            if lam > _MAX_DAMPING:
                break
        if solver_failed_at_max:
            raise NumericalFailure(
                "damped normal system stayed indefinite at maximum damping"
            )
        if not accepted:
            break

    eng.R, eng.t, eng.X = R, t, X
    return BundleReport(
        squared_residual=cost,
        gradient_norm=gnorm,
        iterations=iterations,
        converged=converged,
    )


def bundle_adjust(smap: SceneMap, opts: BundleOptions | None = None):
    """Levenberg-Marquardt refinement of all cameras and points.

    Returns (optimized SceneMap, BundleReport).  The seven-parameter
    similarity ambiguity is left free; damping regularizes the normal
    equations along it.
    """
    opts = opts or BundleOptions()
    m, n, k = smap.n_cameras, smap.n_points, smap.n_observations
    if m < 2:
        raise NotEnoughObservations("need at least 2 cameras")
    if 2 * k < 6 * m + 3 * n - 7:
        raise NotEnoughObservations(
            f"{2 * k} residuals cannot constrain {6 * m + 3 * n} - 7 parameters"
        )
    eng = _Engine(smap)
    report = _lm_loop(eng, opts, grad_free_only=False)
    return smap.with_parameters(eng.R, eng.t, eng.X), report


def adjust_with_fixed_points(
    smap: SceneMap, fixed_track_ids, opts: BundleOptions | None = None
):
    """Bundle adjustment with the listed points frozen in place.

    Only cameras and the remaining points move; convergence is measured
    on the gradient of the free parameters.  Useful as a re-optimization
    oracle once a subset of points has been pinned externally.
    """
    opts = opts or BundleOptions()
    fixed = set(int(i) for i in fixed_track_ids)
    ids = smap.track_ids()
    free_mask = np.array([tid not in fixed for tid in ids], dtype=bool)
    if smap.n_cameras < 1:
        raise NotEnoughObservations("need at least 1 camera")
    n_free = int(free_mask.sum())
    if 2 * smap.n_observations < 6 * smap.n_cameras + 3 * n_free - 7:
        raise NotEnoughObservations("too few residuals for the free parameters")
    eng = _Engine(smap, free_point_mask=free_mask)
    report = _lm_loop(eng, opts, grad_free_only=True)
    return smap.with_parameters(eng.R, eng.t, eng.X), report
