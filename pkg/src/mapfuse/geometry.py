"""Core geometric types and operations.

Calibrated camera poses, 3D points, similarity transforms, projection and
the minimal local-parametrization updates used by the optimizers.  All types
are immutable after construction and all operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChiralityError

__all__ = [
    "CameraPose",
    "Point3",
    "Observation",
    "SimilarityTransform",
    "SceneMap",
    "axis_angle_to_matrix",
    "nearest_rotation",
    "project",
    "reprojection_residual",
    "apply_camera_update",
    "apply_sim3_update",
    "sim3_apply",
    "apply_similarity_to_map",
]

_ORTHONORMALITY_TOL = 1e-9
_REORTHONORMALIZE_DRIFT = 1e-12
_MIN_DEPTH = 1e-12


def _as_readonly(a, shape, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


def _check_rotation(R: np.ndarray, what: str) -> None:
    if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHONORMALITY_TOL):
        raise ValueError(f"{what} is not orthonormal to 1e-9")
    if abs(np.linalg.det(R) - 1.0) > _ORTHONORMALITY_TOL:
        raise ValueError(f"{what} must have determinant +1")


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(v) @ u = cross(v, u)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def axis_angle_to_matrix(w) -> np.ndarray:
    """Rotation matrix exp([w]x) for an axis-angle 3-vector w (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # Second-order Taylor expansion; exact to machine precision here.
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + s * K + c * (K @ K)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthogonal projection of a 3x3 matrix onto the rotation group."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Calibrated camera with projection matrix [rotation | translation]."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "rotation", _as_readonly(self.rotation, (3, 3), "rotation")
        )
        object.__setattr__(
            self,
            "translation",
            _as_readonly(self.translation, (3,), "translation"),
        )
        _check_rotation(self.rotation, "camera rotation")


@dataclass(frozen=True, eq=False)
class Point3:
    """A 3D scene point carrying a globally unique integer track id."""

    coordinates: np.ndarray
    track_id: int

    def __post_init__(self):
        object.__setattr__(
            self,
            "coordinates",
            _as_readonly(self.coordinates, (3,), "coordinates"),
        )
        object.__setattr__(self, "track_id", int(self.track_id))


@dataclass(frozen=True, eq=False)
class Observation:
    """One detection: point `point_index` seen by camera `camera_index`
    at calibrated image coordinates `image_point`."""

    camera_index: int
    point_index: int
    image_point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "camera_index", int(self.camera_index))
        object.__setattr__(self, "point_index", int(self.point_index))
        object.__setattr__(
            self,
            "image_point",
            _as_readonly(self.image_point, (2,), "image_point"),
        )


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Seven-parameter map X -> scale * rotation @ X + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(
            self, "rotation", _as_readonly(self.rotation, (3, 3), "rotation")
        )
        object.__setattr__(
            self,
            "translation",
            _as_readonly(self.translation, (3,), "translation"),
        )
        _check_rotation(self.rotation, "similarity rotation")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return sim3_apply(self, points)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Returns self after other: (self.compose(other))(x) = self(other(x))."""
        s = self.scale * other.scale
        R = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return SimilarityTransform(s, nearest_rotation(R), t)

    def invert(self) -> "SimilarityTransform":
        s = 1.0 / self.scale
        R = self.rotation.T
        t = -s * (R @ self.translation)
        return SimilarityTransform(s, R, t)


@dataclass(frozen=True, eq=False)
class SceneMap:
    """A reconstruction: cameras, 3D points and their 2D observations.

    Construction validates referential integrity, track-id uniqueness and
    that every observed point lies in front of its camera.  Dense array
    views of the parameters are cached for the numerical code.
    """

    cameras: tuple
    points: tuple
    observations: tuple
    _rotations: np.ndarray = field(init=False, repr=False)
    _translations: np.ndarray = field(init=False, repr=False)
    _coordinates: np.ndarray = field(init=False, repr=False)
    _track_ids: np.ndarray = field(init=False, repr=False)
    _camera_indices: np.ndarray = field(init=False, repr=False)
    _point_indices: np.ndarray = field(init=False, repr=False)
    _image_points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "observations", tuple(self.observations))

        m, n, k = len(self.cameras), len(self.points), len(self.observations)
        rot = np.array([c.rotation for c in self.cameras]).reshape(m, 3, 3)
        trans = np.array([c.translation for c in self.cameras]).reshape(m, 3)
        coords = np.array([p.coordinates for p in self.points]).reshape(n, 3)
        ids = np.array([p.track_id for p in self.points], dtype=np.int64)
        cam_idx = np.array(
            [o.camera_index for o in self.observations], dtype=np.int64
        )
        pt_idx = np.array(
            [o.point_index for o in self.observations], dtype=np.int64
        )
        uv = np.array([o.image_point for o in self.observations]).reshape(k, 2)

        if n and len(np.unique(ids)) != n:
            raise ValueError("track ids must be unique within a map")
        if k:
            if cam_idx.min() < 0 or cam_idx.max() >= m:
                raise ValueError("observation references a missing camera")
            if pt_idx.min() < 0 or pt_idx.max() >= n:
                raise ValueError("observation references a missing point")
            depths = (
                np.einsum("kj,kj->k", rot[cam_idx, 2, :], coords[pt_idx])
                + trans[cam_idx, 2]
            )
            bad = np.flatnonzero(depths <= _MIN_DEPTH)
            if bad.size:
                raise ChiralityError(
                    f"observation {bad[0]} has non-positive depth",
                    observation_index=int(bad[0]),
                )

        for name, arr in (
            ("_rotations", rot),
            ("_translations", trans),
            ("_coordinates", coords),
            ("_track_ids", ids),
            ("_camera_indices", cam_idx),
            ("_point_indices", pt_idx),
            ("_image_points", uv),
        ):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    # -- cached dense views -------------------------------------------------

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    def rotations(self) -> np.ndarray:
        return self._rotations

    def translations(self) -> np.ndarray:
        return self._translations

    def coordinates(self) -> np.ndarray:
        return self._coordinates

    def track_ids(self) -> np.ndarray:
        return self._track_ids

    def camera_indices(self) -> np.ndarray:
        return self._camera_indices

    def point_indices(self) -> np.ndarray:
        return self._point_indices

    def image_points(self) -> np.ndarray:
        return self._image_points

    def point_index_of(self, track_id: int) -> int:
        hits = np.flatnonzero(self._track_ids == track_id)
        if hits.size != 1:
            raise KeyError(f"track id {track_id} not in map")
        return int(hits[0])

    @classmethod
    def from_arrays(
        cls, rotations, translations, coordinates, track_ids, cam_idx, pt_idx, uv
    ) -> "SceneMap":
        """Build a SceneMap from stacked parameter arrays."""
        rotations = np.asarray(rotations, dtype=np.float64)
        translations = np.asarray(translations, dtype=np.float64)
        coordinates = np.asarray(coordinates, dtype=np.float64)
        uv = np.asarray(uv, dtype=np.float64)
        cameras = [
            CameraPose(rotations[i], translations[i])
            for i in range(rotations.shape[0])
        ]
        points = [
            Point3(coordinates[j], int(track_ids[j]))
            for j in range(coordinates.shape[0])
        ]
        observations = [
            Observation(int(c), int(p), uv[o])
            for o, (c, p) in enumerate(zip(cam_idx, pt_idx))
        ]
        return cls(cameras, points, observations)

    def with_parameters(
        self, rotations, translations, coordinates
    ) -> "SceneMap":
        """Same structure (ids, observations) with replaced parameters."""
        return SceneMap.from_arrays(
            rotations,
            translations,
            coordinates,
            self._track_ids,
            self._camera_indices,
            self._point_indices,
            self._image_points,
        )


# -- operations --------------------------------------------------------------


def _point_coords(point) -> np.ndarray:
    return np.asarray(getattr(point, "coordinates", point), dtype=np.float64)


def project(pose: CameraPose, point) -> np.ndarray:
    """Pinhole projection of a point into a calibrated camera.

    Raises ChiralityError when the camera-frame depth is <= 1e-12.
    """
    X = pose.rotation @ _point_coords(point) + pose.translation
    if X[2] <= _MIN_DEPTH:
        raise ChiralityError(f"point has non-positive depth {X[2]:.3e}")
    return X[:2] / X[2]


def reprojection_residual(pose: CameraPose, point, obs: Observation) -> np.ndarray:
    """Projection minus measured image point, as a 2-vector."""
    return project(pose, point) - obs.image_point


def apply_camera_update(pose: CameraPose, delta) -> CameraPose:
    """Six-parameter local update: left rotation increment, then translation.

    rotation <- exp([delta[0:3]]x) @ rotation, translation <- translation +
    delta[3:6].
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (6,):
        raise ValueError("camera update must be a 6-vector")
    R = axis_angle_to_matrix(delta[:3]) @ pose.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > _REORTHONORMALIZE_DRIFT:
        R = nearest_rotation(R)
    return CameraPose(R, pose.translation + delta[3:])


def apply_sim3_update(T: SimilarityTransform, delta) -> SimilarityTransform:
    """Seven-parameter local update of a similarity transform.

    Layout: delta[0:3] rotation (axis-angle, left increment), delta[3:6]
    translation, delta[6] log-scale, so the scale stays positive for any
    step.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (7,):
        raise ValueError("similarity update must be a 7-vector")
    R = axis_angle_to_matrix(delta[:3]) @ T.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > _REORTHONORMALIZE_DRIFT:
        R = nearest_rotation(R)
    return SimilarityTransform(
        T.scale * float(np.exp(delta[6])), R, T.translation + delta[3:6]
    )


def sim3_apply(T: SimilarityTransform, points) -> np.ndarray:
    """Apply a similarity transform to one point or a stack of points."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = T.scale * (pts @ T.rotation.T) + T.translation
    return out[0] if single else out


def apply_similarity_to_map(smap: SceneMap, T: SimilarityTransform) -> SceneMap:
    """Re-express a whole reconstruction in the frame X' = T(X).

    Points move to T(X); each camera [R | t] becomes
    [R Rs^T,  s t - R Rs^T ts] for T = (s, Rs, ts), which reproduces the
    original projections exactly, so observations are untouched.
    """
    X = sim3_apply(T, smap.coordinates())
    R_new = smap.rotations() @ T.rotation.T[None, :, :]
    t_new = T.scale * smap.translations() - np.einsum(
        "mij,j->mi", R_new, T.translation
    )
    return smap.with_parameters(R_new, t_new, X)
