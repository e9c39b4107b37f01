"""Shared fixtures and small synthetic-scene builders for the test suite."""

import numpy as np
import pytest

from mapfuse.geometry import CameraPose, SceneMap


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, -1] = -Q[:, -1]
    return Q


def look_at_rotation(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation whose camera z-axis points from `position` toward `target`."""
    z = target - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def ring_scene(
    rng: np.random.Generator,
    n_cameras: int = 4,
    n_points: int = 12,
    sigma: float = 0.0,
    box=(10.0, 6.0, 2.0),
    visibility: float = 1.0,
    points=None,
):
    """Points in a box, cameras on a surrounding ring aimed at the centroid.

    Returns (SceneMap, rotations, translations, coordinates) with the map
    expressed in the ground-truth frame and Gaussian image noise sigma.
    Pass `points` to view a fixed point set instead of drawing a new one.
    """
    ext = np.asarray(box, dtype=float)
    if points is None:
        X = (rng.random((n_points, 3)) - 0.5) * ext
    else:
        X = np.asarray(points, dtype=float)
        n_points = X.shape[0]
    radius = 1.5 * np.linalg.norm(ext)
    angles = 2 * np.pi * np.arange(n_cameras) / n_cameras
    angles = angles + rng.normal(0.0, 0.05, n_cameras)
    centers = np.stack(
        [
            radius * np.cos(angles),
            radius * np.sin(angles),
            rng.normal(0.0, 0.5, n_cameras),
        ],
        axis=1,
    )
    target = X.mean(axis=0)
    rotations = np.stack(
        [look_at_rotation(c, target + rng.normal(0, 0.1, 3)) for c in centers]
    )
    translations = -np.einsum("mij,mj->mi", rotations, centers)

    cam_idx, pt_idx = np.meshgrid(
        np.arange(n_cameras), np.arange(n_points), indexing="ij"
    )
    cam_idx, pt_idx = cam_idx.ravel(), pt_idx.ravel()
    if visibility < 1.0:
        keep = rng.random(cam_idx.shape) < visibility
        # every point must stay visible in at least two cameras
        for j in range(n_points):
            sel = pt_idx == j
            if keep[sel].sum() < 2:
                on = np.flatnonzero(sel)
                keep[rng.choice(on, size=2, replace=False)] = True
        cam_idx, pt_idx = cam_idx[keep], pt_idx[keep]

    Xc = np.einsum("kij,kj->ki", rotations[cam_idx], X[pt_idx]) + translations[
        cam_idx
    ]
    uv = Xc[:, :2] / Xc[:, 2:3]
    if sigma > 0:
        uv = uv + rng.normal(0.0, sigma, uv.shape)
    smap = SceneMap.from_arrays(
        rotations, translations, X, np.arange(n_points), cam_idx, pt_idx, uv
    )
    return smap, rotations, translations, X


def random_similarity(rng: np.random.Generator, max_log_scale=0.3, shift=2.0):
    """A random frame change: rotation, scale in e^[-mls, mls], translation."""
    from mapfuse.geometry import SimilarityTransform

    return SimilarityTransform(
        float(np.exp(rng.uniform(-max_log_scale, max_log_scale))),
        random_rotation(rng),
        rng.uniform(-shift, shift, 3),
    )


def box_maps(
    rng: np.random.Generator,
    n_maps: int = 3,
    n_cameras: int = 6,
    n_points: int = 30,
    sigma: float = 0.02,
    own_frames: bool = True,
):
    """Several sessions viewing one ground-truth point set.

    Each map gets its own cameras and noise draw and, when own_frames is
    set, is re-expressed in its own random similarity frame.  Returns
    (ground-truth points, [SceneMap], [frame transform per map]) where
    frame[k] maps ground-truth coordinates into map k's frame.
    """
    from mapfuse.geometry import SimilarityTransform, apply_similarity_to_map

    ext = np.array([10.0, 6.0, 2.0])
    X = (rng.random((n_points, 3)) - 0.5) * ext
    maps, frames = [], []
    for _ in range(n_maps):
        smap, *_ = ring_scene(rng, n_cameras, n_points, sigma, points=X)
        if own_frames:
            T = random_similarity(rng)
            smap = apply_similarity_to_map(smap, T)
        else:
            T = SimilarityTransform.identity()
        maps.append(smap)
        frames.append(T)
    return X, maps, frames


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_acceptance_lines: list = []


def record_acceptance(line: str) -> None:
    """Collect a one-line verdict for the end-of-run acceptance summary."""
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance summary")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
