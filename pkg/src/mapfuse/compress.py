"""Low-memory footprints of optimized maps.

An optimized map is summarized by the triple (q0, a, R): the coordinates
of a set of anchor points, the residual magnitude at the optimum, and an
upper-triangular matrix such that

    a^2 + (q - q0)^T R^T R (q - q0)

approximates the squared reprojection error after the remaining
parameters (cameras and non-anchor points) are re-optimized for the
given anchor positions.  The seven flat directions of the similarity
ambiguity are filled with small penalty rows orthogonal to the
informative part of R, so R^T R stays positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .bundle import assemble_jacobian, assemble_residuals, gradient_norm
from .errors import (
    DegenerateAnchors,
    NoRecoveryData,
    NotConverged,
    SingularAuxiliary,
)
from .geometry import SceneMap, apply_camera_update

__all__ = [
    "CompressedMap",
    "RecoveryData",
    "aux_sensitivity",
    "reduced_jacobian",
    "gauge_generators",
    "compress_map",
    "eval_compressed",
    "recover_aux",
]

_COND_LIMIT = 1e12
_RANK_TOL = 1e-9
_CONVERGENCE_FACTOR = 1e-6


@dataclass(frozen=True, eq=False)
class RecoveryData:
    """Everything needed to rebuild full map parameters from new anchors.

    ``dsdq`` maps an anchor displacement to the first-order displacement
    of the auxiliary parameters (camera charts first, then non-anchor
    points), all expressed in the local charts centered at ``base``.
    """

    base: SceneMap
    dsdq: np.ndarray  # (6m + 3(n-|q|), 3|q|)
    anchor_point_indices: np.ndarray
    other_point_indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dsdq", _readonly(self.dsdq, dtype=float))
        object.__setattr__(
            self,
            "anchor_point_indices",
            _readonly(self.anchor_point_indices, dtype=np.int64),
        )
        object.__setattr__(
            self,
            "other_point_indices",
            _readonly(self.other_point_indices, dtype=np.int64),
        )


def _readonly(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class CompressedMap:
    """Footprint (q0, a, R) of an optimized map.

    anchor_ids fixes the meaning and order of the 3|q| entries of q0;
    eta_res is the residual count (2 per observation) and d_dof the
    number of essential parameters (6m + 3n - 7) behind ``a``, kept for
    the residual statistics.  ``recovery`` optionally carries the data
    needed by recover_aux.
    """

    anchor_ids: tuple
    q0: np.ndarray
    a: float
    R: np.ndarray
    eta_res: int
    d_dof: int
    recovery: RecoveryData | None = None

    def __post_init__(self):
        ids = tuple(int(t) for t in self.anchor_ids)
        if len(ids) < 3:
            raise ValueError("need at least 3 anchors")
        if len(set(ids)) != len(ids):
            raise ValueError("anchor_ids must be unique")
        object.__setattr__(self, "anchor_ids", ids)
        q0 = _readonly(self.q0)
        if q0.shape != (3 * len(ids),):
            raise ValueError("q0 must have 3 entries per anchor")
        object.__setattr__(self, "q0", q0)
        if not self.a >= 0:
            raise ValueError("a must be nonnegative")
        object.__setattr__(self, "a", float(self.a))
        R = _readonly(self.R)
        d = q0.shape[0]
        if R.shape != (d, d):
            raise ValueError("R must be square of size 3|q|")
        if np.any(np.tril(R, -1) != 0.0):
            raise ValueError("R must be upper triangular")
        object.__setattr__(self, "R", R)
        if int(self.eta_res) <= 0 or int(self.d_dof) <= 0:
            raise ValueError("eta_res and d_dof must be positive")
        object.__setattr__(self, "eta_res", int(self.eta_res))
        object.__setattr__(self, "d_dof", int(self.d_dof))

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_ids)

    def anchor_coordinates(self) -> np.ndarray:
        """Anchor positions as an (|q|, 3) array."""
        return self.q0.reshape(-1, 3)


def aux_sensitivity(J_a: np.ndarray, J_b: np.ndarray) -> np.ndarray:
    """First-order response of the auxiliary parameters to anchor motion.

    Solves the normal equations of the auxiliary block:
    ds/dq = -(J_b^T J_b)^{-1} (J_a^T J_b)^T.
    """
    J_a = np.asarray(J_a, dtype=float)
    J_b = np.asarray(J_b, dtype=float)
    if J_a.shape[0] != J_b.shape[0]:
        raise ValueError("J_a and J_b must have the same number of rows")
    N = J_b.T @ J_b
    if N.size:
        evals = np.linalg.eigvalsh(N)
        if evals[0] <= 0 or evals[-1] / evals[0] > _COND_LIMIT:
            raise SingularAuxiliary(
                "auxiliary normal matrix is singular or too ill-conditioned"
            )
        cf = scipy.linalg.cho_factor(N, lower=True, check_finite=False)
        return -scipy.linalg.cho_solve(cf, J_b.T @ J_a, check_finite=False)
    return np.zeros((0, J_a.shape[1]))


def reduced_jacobian(
    J_a: np.ndarray, J_b: np.ndarray, dsdq: np.ndarray
) -> np.ndarray:
    """Total derivative of the residuals with respect to the anchors,
    accounting for the induced motion of the auxiliaries:
    J_q = J_a + J_b (ds/dq)."""
    J_a = np.asarray(J_a, dtype=float)
    J_b = np.asarray(J_b, dtype=float)
    dsdq = np.asarray(dsdq, dtype=float)
    if J_b.shape[1] != dsdq.shape[0] or dsdq.shape[1] != J_a.shape[1]:
        raise ValueError("shapes of J_b and ds/dq do not conform")
    if J_b.size == 0:
        return J_a.copy()
    return J_a + J_b @ dsdq


def _orthonormal_rows(rows: np.ndarray, tol: float):
    """Order-preserving orthonormalization of the rows (QR of the
    transpose).  Returns (Q, smallest diagonal magnitude): row k of Q
    lies in the span of the first k input rows."""
    Q, T = np.linalg.qr(rows.T)
    d = np.abs(np.diag(T))
    scale = np.linalg.norm(rows, axis=1).max(initial=0.0)
    if scale == 0.0 or d.size == 0:
        return Q.T, 0.0
    return Q.T, float(d.min() / scale)


def _raw_gauge_generators(q0: np.ndarray) -> np.ndarray:
    """Unnormalized tangent directions of the similarity orbit at q0:
    three translations, three rotations, one scaling (7 x 3|q|)."""
    X = q0.reshape(-1, 3)
    nq = X.shape[0]
    G = np.zeros((7, 3 * nq))
    for i in range(3):
        G[i].reshape(-1, 3)[:, i] = 1.0
    for i, omega in enumerate(np.eye(3)):
        G[3 + i] = np.cross(omega, X).ravel()
    G[6] = q0
    return G


def gauge_generators(q0: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the similarity-orbit tangent at q0.

    Rows are orthonormalized in the order translation (3), rotation (3),
    scaling (1), so earlier directions keep their geometric meaning.
    Raises DegenerateAnchors when the orbit is flat (e.g. collinear
    anchors make one rotation ineffective).
    """
    q0 = np.asarray(q0, dtype=float).ravel()
    if q0.size < 9 or q0.size % 3:
        raise ValueError("q0 must stack at least three 3D anchors")
    G = _raw_gauge_generators(q0)
    Q, rel = _orthonormal_rows(G, _RANK_TOL)
    if rel < _RANK_TOL:
        raise DegenerateAnchors(
            "anchor configuration does not span all seven similarity modes"
        )
    return Q


def _split_columns(smap: SceneMap, anchor_ids):
    """Column bookkeeping: anchor-point columns vs all the rest."""
    ids = [int(t) for t in anchor_ids]
    if len(ids) != len(set(ids)):
        raise ValueError("anchor_ids must be unique")
    anchor_pts = np.array([smap.point_index_of(t) for t in ids], dtype=np.int64)
    m, n = smap.n_cameras, smap.n_points
    in_q = np.zeros(n, dtype=bool)
    in_q[anchor_pts] = True
    other_pts = np.flatnonzero(~in_q)
    a_cols = (6 * m + 3 * anchor_pts[:, None] + np.arange(3)).ravel()
    b_cols = np.concatenate(
        [
            np.arange(6 * m),
            (6 * m + 3 * other_pts[:, None] + np.arange(3)).ravel(),
        ]
    )
    return ids, anchor_pts, other_pts, a_cols, b_cols


def compress_map(
    smap: SceneMap,
    anchor_ids,
    with_recovery: bool = False,
    check_convergence: bool = True,
) -> CompressedMap:
    """Summarize an optimized map as a CompressedMap footprint.

    The map must be at an optimum (checked through the gradient norm
    unless ``check_convergence`` is False, for callers that deliberately
    compress partially optimized maps).  The residual derivative is
    reduced onto the anchor coordinates, triangularized by QR, and its
    seven flat rows are replaced by scaled penalty rows orthogonal to
    the informative rows.
    """
    ids, anchor_pts, other_pts, a_cols, b_cols = _split_columns(
        smap, anchor_ids
    )
    r = assemble_residuals(smap)
    a = float(np.linalg.norm(r))
    if check_convergence:
        g = gradient_norm(smap)
        if g > _CONVERGENCE_FACTOR * (1.0 + a):
            raise NotConverged(
                f"map is not at an optimum (gradient norm {g:.3e})",
                gradient_norm=g,
            )

    J = assemble_jacobian(smap).toarray()
    J_a = J[:, a_cols]
    J_b = J[:, b_cols]
    dsdq = aux_sensitivity(J_a, J_b)
    J_q = reduced_jacobian(J_a, J_b, dsdq)

    q0 = smap.coordinates()[anchor_pts].ravel()
    R = _triangularize_with_gauge_fill(J_q, q0)

    recovery = None
    if with_recovery:
        recovery = RecoveryData(
            base=smap,
            dsdq=dsdq,
            anchor_point_indices=anchor_pts,
            other_point_indices=other_pts,
        )
    return CompressedMap(
        anchor_ids=tuple(ids),
        q0=q0,
        a=a,
        R=R,
        eta_res=2 * smap.n_observations,
        d_dof=6 * smap.n_cameras + 3 * smap.n_points - 7,
        recovery=recovery,
    )


def _triangularize_with_gauge_fill(J_q: np.ndarray, q0: np.ndarray):
    """QR of the reduced derivative with the seven flat rows replaced by
    scaled penalty rows spanning the similarity orbit, then
    re-triangularized.  Shared by map and merge compression."""
    d = J_q.shape[1]
    if d < 9:
        raise DegenerateAnchors("need at least three anchors")
    R_raw = np.linalg.qr(J_q, mode="r")
    if R_raw.shape[0] < d:
        raise DegenerateAnchors("too few residual rows for the anchor count")

    row_norms = np.linalg.norm(R_raw, axis=1)
    order = np.argsort(row_norms, kind="stable")
    keep = np.sort(order[7:])
    K = R_raw[keep]
    mu = float(np.median(np.abs(np.diag(R_raw))[: d - 7]))

    G = gauge_generators(q0)
    Qk, _ = np.linalg.qr(K.T)  # orthonormal basis of the kept row space
    G_perp = G - (G @ Qk) @ Qk.T
    G_on, rel = _orthonormal_rows(G_perp, _RANK_TOL)
    if rel < 1e-6:
        raise DegenerateAnchors(
            "similarity modes are not separable from the informative rows"
        )
    stack = np.vstack([K, mu * G_on])
    R = np.linalg.qr(stack, mode="r")
    flip = np.sign(np.diag(R))
    flip[flip == 0] = 1.0
    R = flip[:, None] * R
    R[np.tril_indices(d, -1)] = 0.0
    return R


def eval_compressed(cmap: CompressedMap, q: np.ndarray):
    """Compressed residual at anchor positions q.

    Returns (r_hat, r_hat^T r_hat) with r_hat = [a; R (q - q0)], so the
    scalar is a^2 + (q - q0)^T R^T R (q - q0)."""
    q = np.asarray(q, dtype=float).ravel()
    if q.shape != cmap.q0.shape:
        raise ValueError("q must have length 3|q|")
    tail = cmap.R @ (q - cmap.q0)
    r_hat = np.concatenate([[cmap.a], tail])
    return r_hat, float(cmap.a**2 + tail @ tail)


def recover_aux(cmap: CompressedMap, q_new: np.ndarray) -> SceneMap:
    """Rebuild a full map for new anchor positions.

    Moves the anchors to q_new and shifts every auxiliary parameter by
    its first-order response (ds/dq)(q_new - q0), applied through the
    camera and point charts.  Requires the footprint to carry recovery
    data."""
    if cmap.recovery is None:
        raise NoRecoveryData(
            "footprint was created without recovery data"
        )
    q_new = np.asarray(q_new, dtype=float).ravel()
    if q_new.shape != cmap.q0.shape:
        raise ValueError("q_new must have length 3|q|")
    rec = cmap.recovery
    base = rec.base
    m = base.n_cameras
    ds = rec.dsdq @ (q_new - cmap.q0)

    rotations = np.empty((m, 3, 3))
    translations = np.empty((m, 3))
    for i, cam in enumerate(base.cameras):
        pose = apply_camera_update(cam, ds[6 * i : 6 * i + 6])
        rotations[i] = pose.rotation
        translations[i] = pose.translation
    coords = np.array(base.coordinates())
    if rec.other_point_indices.size:
        coords[rec.other_point_indices] += ds[6 * m :].reshape(-1, 3)
    coords[rec.anchor_point_indices] = q_new.reshape(-1, 3)
    return base.with_parameters(rotations, translations, coords)
