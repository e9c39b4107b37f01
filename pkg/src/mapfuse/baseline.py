"""Comparison methods for map merging.

Three references bracket the merge optimizer: closed-form similarity
registration (Procrustes), register-and-average of matched points (the
naive method, order dependent by construction), and a joint bundle over
all raw observations (the gold standard the footprints approximate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import BundleOptions, bundle_adjust
from .errors import DegenerateConfiguration, InsufficientOverlap
from .geometry import (
    SceneMap,
    SimilarityTransform,
    apply_similarity_to_map,
    nearest_rotation,
)

__all__ = [
    "AlignmentResult",
    "procrustes_align",
    "register_chained",
    "average_merge",
    "full_bundle_merge",
]


@dataclass(frozen=True)
class AlignmentResult:
    """A fitted similarity transform and its post-alignment RMSE."""

    transform: SimilarityTransform
    rmse: float

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("rmse must be nonnegative")


def procrustes_align(source, target) -> AlignmentResult:
    """Closed-form similarity minimizing sum ||s R x_i + t - y_i||^2.

    Scale is included (the frame ambiguity of a reconstruction is a full
    similarity) and the rotation is reflection-guarded.  Requires at
    least three non-collinear source points.
    """
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("source and target must be matching (n, 3) arrays")
    n = X.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 paired points")

    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = float(np.sum(Xc * Xc)) / n
    sv_src = np.linalg.svd(Xc, compute_uv=False)
    if var_x == 0.0 or sv_src[1] <= 1e-12 * sv_src[0]:
        raise DegenerateConfiguration(
            "source points are collinear or coincident"
        )

    C = (Yc.T @ Xc) / n
    U, D, Vt = np.linalg.svd(C)
    flip = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    S = np.array([1.0, 1.0, flip])
    R = nearest_rotation(U @ np.diag(S) @ Vt)
    s = float(np.sum(D * S)) / var_x
    if s <= 0:
        raise DegenerateConfiguration("fitted scale is not positive")
    t = my - s * (R @ mx)
    T = SimilarityTransform(s, R, t)
    err = T.apply(X) - Y
    return AlignmentResult(T, float(np.sqrt(np.mean(np.sum(err * err, axis=1)))))


def _as_anchor_array(map_or_points, corr, k) -> np.ndarray:
    """Anchor coordinates of entry k, ordered like corr.projections[k].

    Accepts a plain (n_k, 3) array, or a SceneMap whose points carry the
    global track ids named by corr.global_ids.
    """
    positions = corr.projections[k]
    if isinstance(map_or_points, SceneMap):
        coords = map_or_points.coordinates()
        idx = [
            map_or_points.point_index_of(corr.global_ids[g]) for g in positions
        ]
        return np.array(coords[idx], dtype=float)
    pts = np.asarray(map_or_points, dtype=float)
    if pts.ndim != 2 or pts.shape != (len(positions), 3):
        raise ValueError(
            "anchor set must be an (n_k, 3) array matching the projection list"
        )
    return np.array(pts)


def register_chained(anchor_sets, corr):
    """Similarity transforms taking each map's frame into map 0's frame.

    Maps are registered by Procrustes on matched points, chained along a
    spanning tree rooted at map 0 when a map shares no points with map 0
    directly.  Every link needs >= 3 shared, non-collinear points.
    Raises InsufficientOverlap naming the first unreachable map.
    """
    N = len(anchor_sets)
    if N == 0:
        raise ValueError("need at least one map")
    pos_of = [
        {int(g): j for j, g in enumerate(corr.projections[k])}
        for k in range(N)
    ]
    transforms: list = [None] * N
    transforms[0] = SimilarityTransform.identity()
    pending = set(range(1, N))
    frontier = [0]
    while frontier:
        parent = frontier.pop()
        for child in sorted(pending):
            shared = sorted(set(pos_of[parent]) & set(pos_of[child]))
            if len(shared) < 3:
                continue
            src = anchor_sets[child][[pos_of[child][g] for g in shared]]
            dst = anchor_sets[parent][[pos_of[parent][g] for g in shared]]
            link = procrustes_align(src, dst).transform
            transforms[child] = transforms[parent].compose(link)
            pending.discard(child)
            frontier.append(child)
    if pending:
        bad = min(pending)
        raise InsufficientOverlap(
            f"map {bad} shares fewer than 3 points with the maps reachable "
            "from map 0",
            map_index=bad,
        )
    return transforms


def average_merge(maps, corr) -> np.ndarray:
    """Register-and-average merging of matched points.

    Sequentially registers each map (input order) to the running global
    frame by Procrustes on already-known matched points, then averages
    every global point over all its registered representations.  Returns
    the merged (n_bar, 3) point set ordered like corr.global_ids.  The
    result depends on the input order; that order dependence is the
    documented weakness of this baseline.
    """
    N = len(corr.projections)
    if len(maps) != N:
        raise ValueError("one entry per projection list required")
    anchor_sets = [_as_anchor_array(maps[k], corr, k) for k in range(N)]
    n_bar = len(corr.global_ids)

    estimates: list[list[np.ndarray]] = [[] for _ in range(n_bar)]
    registered_first = False
    placed = np.zeros(n_bar, dtype=bool)
    for k in range(N):
        positions = np.asarray(corr.projections[k], dtype=np.int64)
        if not registered_first:
            T = SimilarityTransform.identity()
            registered_first = True
        else:
            known = [g for g in positions if placed[g]]
            if len(known) < 3:
                raise InsufficientOverlap(
                    f"map {k} shares fewer than 3 points with the maps "
                    "already merged",
                    map_index=k,
                )
            current = np.array(
                [np.mean(estimates[g], axis=0) for g in known]
            )
            local = anchor_sets[k][[list(positions).index(g) for g in known]]
            T = procrustes_align(local, current).transform
        moved = T.apply(anchor_sets[k])
        for j, g in enumerate(positions):
            estimates[g].append(moved[j])
            placed[g] = True
    if not np.all(placed):
        missing = int(np.flatnonzero(~placed)[0])
        raise ValueError(f"global point {missing} appears in no map")
    return np.array([np.mean(e, axis=0) for e in estimates])


def _refine_registration(anchor_sets, corr, transforms, rounds=50):
    """Generalized-Procrustes polish of a chained registration.

    Alternates between averaging the matched points over all registered
    maps and re-fitting each map's similarity to that average, spreading
    the registration error over every link instead of letting it pile up
    along the chain.  Renormalizing to map 0's frame each round keeps
    the gauge fixed and rules out the trivial shrink-to-zero solution.
    """
    N = len(anchor_sets)
    n_bar = len(corr.global_ids)
    positions = [list(p) for p in corr.projections]
    transforms = list(transforms)
    last = None
    for _ in range(rounds):
        sums = np.zeros((n_bar, 3))
        counts = np.zeros(n_bar)
        for k in range(N):
            sums[positions[k]] += transforms[k].apply(anchor_sets[k])
            counts[positions[k]] += 1.0
        means = sums / counts[:, None]
        fits = [
            procrustes_align(anchor_sets[k], means[positions[k]]).transform
            for k in range(N)
        ]
        base = fits[0].invert()
        transforms = [base.compose(T) for T in fits]
        means = base.apply(means)
        total = sum(
            float(np.sum(np.square(T.apply(a) - means[p])))
            for T, a, p in zip(transforms, anchor_sets, positions)
        )
        if last is not None and abs(last - total) <= 1e-12 * max(total, 1.0):
            break
        last = total
    return transforms


def full_bundle_merge(
    raw_maps, corr, opts: BundleOptions | None = None
) -> SceneMap:
    """Joint bundle over all raw observations of all maps.

    Each map is first re-expressed in map 0's frame by chained Procrustes
    registration of the matched points, polished by a few
    generalized-Procrustes rounds; points with the same track id are
    unified (initialized at the mean of their transformed positions),
    cameras and observations are concatenated, and the combined problem
    is bundle adjusted.  This uses everything the footprints discard, so
    it is the quality ceiling for the compressed merge.
    """
    N = len(raw_maps)
    if N == 0:
        raise ValueError("need at least one map")
    if len(corr.projections) != N:
        raise ValueError("one projection list per map required")
    anchor_sets = [_as_anchor_array(raw_maps[k], corr, k) for k in range(N)]
    transforms = register_chained(anchor_sets, corr)
    if N > 1:
        transforms = _refine_registration(anchor_sets, corr, transforms)
    reframed = [
        apply_similarity_to_map(raw_maps[k], transforms[k]) for k in range(N)
    ]

    track_positions: dict[int, list[np.ndarray]] = {}
    for smap in reframed:
        coords = smap.coordinates()
        for tid, xyz in zip(smap.track_ids(), coords):
            track_positions.setdefault(int(tid), []).append(np.array(xyz))
    unified_ids = sorted(track_positions)
    unified_index = {tid: i for i, tid in enumerate(unified_ids)}
    coordinates = np.array(
        [np.mean(track_positions[tid], axis=0) for tid in unified_ids]
    )

    rotations, translations = [], []
    cam_idx, pt_idx, uv = [], [], []
    cam_offset = 0
    for smap in reframed:
        rotations.append(np.asarray(smap.rotations()))
        translations.append(np.asarray(smap.translations()))
        local_ids = smap.track_ids()
        remap = np.array(
            [unified_index[int(t)] for t in local_ids], dtype=np.int64
        )
        cam_idx.append(np.asarray(smap.camera_indices()) + cam_offset)
        pt_idx.append(remap[np.asarray(smap.point_indices())])
        uv.append(np.asarray(smap.image_points()))
        cam_offset += smap.n_cameras

    combined = SceneMap.from_arrays(
        np.concatenate(rotations),
        np.concatenate(translations),
        coordinates,
        np.array(unified_ids, dtype=np.int64),
        np.concatenate(cam_idx),
        np.concatenate(pt_idx),
        np.concatenate(uv),
    )
    merged, _ = bundle_adjust(combined, opts or BundleOptions())
    return merged
