"""Joint merging of compressed map footprints.

Each footprint contributes the residual block [a_k; R_k (T_k p_k(q) - q_k)]
where q collects the global anchor points, p_k selects the ones map k saw,
and T_k is the similarity transform from the global frame into map k's
frame.  Minimizing the stacked squared norm over (q, T_2..T_N) with T_1
frozen at identity aligns all sessions in one gauge-fixed frame at the
cost of |q| instead of the full reconstructions.

The merged result can be recompressed into a footprint of the same form,
which is what makes hierarchical merging possible, and the growth of the
squared residual feeds the statistical change test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .baseline import procrustes_align, register_chained
from .bundle import BundleOptions, BundleReport
from .compress import (
    CompressedMap,
    _triangularize_with_gauge_fill,
    aux_sensitivity,
    reduced_jacobian,
)
from .errors import (
    DegenerateCorrespondences,
    DegenerateConfiguration,
    InsufficientOverlap,
    NumericalFailure,
)
from .geometry import SimilarityTransform, apply_sim3_update, skew
from .stats import change_test, dof_delta, gamma_params

__all__ = [
    "Correspondences",
    "MergeSolution",
    "init_merge",
    "merge_residual",
    "merge_bundle",
    "recompress_merge",
    "robust_hierarchical_merge",
]

_MAX_DAMPING = 1e12


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Anchor matching across maps.

    global_ids orders the merged anchor set q (length n_bar); for each
    map k, projections[k][j] is the position in global_ids matched to
    the j-th entry of that map's anchor_ids.  Every global id must be
    matched by at least one map, and a map may not match the same global
    point twice.
    """

    global_ids: tuple
    projections: tuple

    def __post_init__(self):
        gids = tuple(int(g) for g in self.global_ids)
        if len(set(gids)) != len(gids):
            raise ValueError("global_ids must be unique")
        object.__setattr__(self, "global_ids", gids)
        projs = []
        covered = np.zeros(len(gids), dtype=bool)
        for k, plist in enumerate(self.projections):
            p = tuple(int(i) for i in plist)
            if any(i < 0 or i >= len(gids) for i in p):
                raise ValueError(f"projection list {k} indexes out of range")
            if len(set(p)) != len(p):
                raise ValueError(
                    f"projection list {k} matches a global point twice"
                )
            covered[list(p)] = True
            projs.append(p)
        if len(gids) and not covered.all():
            missing = int(np.flatnonzero(~covered)[0])
            raise ValueError(
                f"global id {gids[missing]} appears in no map"
            )
        object.__setattr__(self, "projections", tuple(projs))

    @property
    def n_global(self) -> int:
        return len(self.global_ids)

    @classmethod
    def from_anchor_ids(cls, anchor_id_lists) -> "Correspondences":
        """Match anchors across maps by shared track id; global order is
        first appearance over the input lists."""
        gids: list[int] = []
        index: dict[int, int] = {}
        for ids in anchor_id_lists:
            for t in ids:
                t = int(t)
                if t not in index:
                    index[t] = len(gids)
                    gids.append(t)
        projections = tuple(
            tuple(index[int(t)] for t in ids) for ids in anchor_id_lists
        )
        return cls(global_ids=tuple(gids), projections=projections)

    def shared_counts(self) -> np.ndarray:
        """Number of maps matching each global point."""
        mult = np.zeros(self.n_global, dtype=np.int64)
        for p in self.projections:
            mult[list(p)] += 1
        return mult


@dataclass(frozen=True, eq=False)
class MergeSolution:
    """Result of a merge bundle: the global anchors, one transform per
    map (global frame -> map frame), and the merged residual scalar."""

    q: np.ndarray
    transforms: tuple
    a_bar: float
    report: BundleReport

    def __post_init__(self):
        q = np.array(self.q, dtype=float).ravel()
        q.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not self.a_bar >= 0:
            raise ValueError("a_bar must be nonnegative")


def _check_inputs(cmaps, corr):
    if len(cmaps) == 0:
        raise ValueError("need at least one footprint")
    if len(corr.projections) != len(cmaps):
        raise ValueError("one projection list per footprint required")
    for k, (cmap, proj) in enumerate(zip(cmaps, corr.projections)):
        if len(proj) != len(cmap.anchor_ids):
            raise ValueError(
                f"projection list {k} does not cover that map's anchors"
            )


def init_merge(cmaps, corr):
    """Initial global anchors and transforms for the merge bundle.

    The global frame is map 0's frame (T_0 = identity); other transforms
    come from closed-form similarity registration on matched anchors,
    chained through a spanning tree when a map does not overlap map 0
    directly.  Global points are initialized from the first map that
    saw them, pulled into the global frame.
    """
    _check_inputs(cmaps, corr)
    anchor_sets = [c.anchor_coordinates() for c in cmaps]
    try:
        to_global = register_chained(anchor_sets, corr)
    except DegenerateConfiguration as e:
        raise DegenerateCorrespondences(str(e)) from e
    transforms = tuple(t.invert() for t in to_global)

    n_bar = corr.n_global
    q = np.zeros((n_bar, 3))
    filled = np.zeros(n_bar, dtype=bool)
    for k, cmap in enumerate(cmaps):
        positions = np.asarray(corr.projections[k], dtype=np.int64)
        new = ~filled[positions]
        if np.any(new):
            moved = to_global[k].apply(anchor_sets[k][new])
            q[positions[new]] = moved
            filled[positions[new]] = True
    return q.ravel(), transforms


def merge_residual(cmaps, corr, q, transforms) -> np.ndarray:
    """Stacked merge residual [a_k; R_k (T_k p_k(q) - q_k)] over maps."""
    _check_inputs(cmaps, corr)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    parts = []
    for cmap, T, proj in zip(cmaps, transforms, corr.projections):
        local = T.apply(q[list(proj)])
        parts.append([cmap.a])
        parts.append(cmap.R @ (local.ravel() - cmap.q0))
    return np.concatenate(parts)


def _merge_blocks(cmaps, corr, q, transforms, include_first: bool):
    """Weighted residual rows and their derivative.

    Returns (r_w, J_w) where r_w stacks only the R_k-weighted rows (the
    a_k entries are constants) and J_w has 3*n_bar anchor columns
    followed by 7 columns per transform (all N when include_first, else
    maps 1..N-1; map 0's frame is the gauge).
    """
    q3 = np.asarray(q, dtype=float).reshape(-1, 3)
    n_bar = q3.shape[0]
    N = len(cmaps)
    n_t = N if include_first else N - 1
    cols = 3 * n_bar + 7 * n_t
    rows = sum(3 * len(c.anchor_ids) for c in cmaps)
    J = np.zeros((rows, cols))
    r = np.empty(rows)

    row0 = 0
    for k, (cmap, T) in enumerate(zip(cmaps, transforms)):
        proj = np.asarray(corr.projections[k], dtype=np.int64)
        nk = proj.size
        sR = T.scale * T.rotation
        pts = q3[proj]
        v = pts @ sR.T  # scaled-rotated anchors, rows of T(x) - t
        r[row0 : row0 + 3 * nk] = cmap.R @ (
            (v + T.translation).ravel() - cmap.q0
        )

        # anchor columns: d(T x_g)/d x_g = s R, weighted by R_k's columns
        for j, g in enumerate(proj):
            J[row0 : row0 + 3 * nk, 3 * g : 3 * g + 3] += (
                cmap.R[:, 3 * j : 3 * j + 3] @ sR
            )

        # transform columns: rotation, translation, log-scale chart
        t_index = k if include_first else k - 1
        if t_index >= 0:
            D = np.zeros((3 * nk, 7))
            for j in range(nk):
                D[3 * j : 3 * j + 3, 0:3] = -skew(v[j])
                D[3 * j : 3 * j + 3, 3:6] = np.eye(3)
                D[3 * j : 3 * j + 3, 6] = v[j]
            c0 = 3 * n_bar + 7 * t_index
            J[row0 : row0 + 3 * nk, c0 : c0 + 7] = cmap.R @ D
        row0 += 3 * nk
    return r, J


def merge_bundle(cmaps, corr, opts: BundleOptions | None = None) -> MergeSolution:
    """Levenberg-Marquardt merge of N footprints.

    Minimizes the stacked squared residual over the global anchors and
    the transforms of maps 1..N-1 (map 0's transform stays identity,
    fixing the seven-parameter frame ambiguity of the merged map).
    Iterations count trial steps; convergence is a gradient-norm test,
    as in the single-map optimizer.
    """
    opts = opts or BundleOptions()
    _check_inputs(cmaps, corr)
    q, transforms = init_merge(cmaps, corr)
    transforms = list(transforms)
    N = len(cmaps)
    a_sq = sum(c.a**2 for c in cmaps)

    r, J = _merge_blocks(cmaps, corr, q, transforms, include_first=False)
    cost = a_sq + float(r @ r)
    lam = opts.initial_damping
    iterations = 0
    converged = False
    gnorm = np.inf

    while True:
        g = 2.0 * (J.T @ r)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.gradient_norm_tolerance:
            converged = True
            break
        if iterations >= opts.max_iterations:
            break

        H = J.T @ J
        diag = np.diag(H).copy()
        floor = 1e-12 * max(diag.max(initial=0.0), 1.0)
        accepted = False
        while iterations < opts.max_iterations:
            iterations += 1
            Hd = H + np.diag(lam * np.maximum(diag, floor) + floor)
            try:
                cf = scipy.linalg.cho_factor(
                    Hd, lower=True, check_finite=False
                )
                delta = scipy.linalg.cho_solve(
                    cf, -0.5 * g, check_finite=False
                )
            except (scipy.linalg.LinAlgError, ValueError):
                lam *= opts.damping_up_factor
                if lam > _MAX_DAMPING:
                    raise NumericalFailure(
                        "merge normal system stayed indefinite at maximum "
                        "damping"
                    )
                continue
            if not np.all(np.isfinite(delta)):
                lam *= opts.damping_up_factor
                if lam > _MAX_DAMPING:
                    raise NumericalFailure("merge step is not finite")
                continue

            q_try = q + delta[: q.size]
            transforms_try = list(transforms)
            for k in range(1, N):
                d = delta[q.size + 7 * (k - 1) : q.size + 7 * k]
                transforms_try[k] = apply_sim3_update(transforms[k], d)
            r_try, J_try = _merge_blocks(
                cmaps, corr, q_try, transforms_try, include_first=False
            )
            cost_try = a_sq + float(r_try @ r_try)
            if cost_try < cost:
                q, transforms = q_try, transforms_try
                r, J, cost = r_try, J_try, cost_try
                lam = max(lam / opts.damping_down_factor, 1e-12)
                accepted = True
                break
            lam *= opts.damping_up_factor
            if lam > _MAX_DAMPING:
                break
        if not accepted:
            break

    a_bar = float(np.sqrt(cost))
    assert a_bar**2 >= a_sq - 1e-9
    report = BundleReport(
        squared_residual=cost,
        gradient_norm=gnorm,
        iterations=iterations,
        converged=converged,
    )
    return MergeSolution(
        q=q, transforms=tuple(transforms), a_bar=a_bar, report=report
    )


def recompress_merge(
    cmaps, corr, solution: MergeSolution, demote_ids=()
) -> CompressedMap:
    """Footprint of a merged map, usable in further merges.

    The merge residual's derivative is taken with respect to the global
    anchors and ALL transforms (including map 0's: with the anchors as
    primary variables, every frame parameter is auxiliary).  Transform
    columns — plus any anchors named in demote_ids — are marginalized
    through the sensitivity solve, the reduced derivative is
    triangularized, and the seven flat rows are replaced by penalty rows
    exactly as in single-map compression.  Residual and parameter counts
    accumulate: eta_res sums, d_dof sums minus the re-imposed degrees of
    freedom.
    """
    _check_inputs(cmaps, corr)
    _, J_w = _merge_blocks(
        cmaps, corr, solution.q, solution.transforms, include_first=True
    )
    n_bar = corr.n_global
    demote = {int(t) for t in demote_ids}
    unknown = demote - set(corr.global_ids)
    if unknown:
        raise ValueError(f"demoted ids not in global_ids: {sorted(unknown)}")
    keep = [g for g, t in enumerate(corr.global_ids) if t not in demote]
    if len(keep) < 3:
        raise ValueError("fewer than 3 anchors would remain primary")
    keep_idx = np.asarray(keep, dtype=np.int64)
    a_cols = (3 * keep_idx[:, None] + np.arange(3)).ravel()
    b_cols = np.setdiff1d(np.arange(J_w.shape[1]), a_cols)

    J_a = J_w[:, a_cols]
    J_b = J_w[:, b_cols]
    dsdq = aux_sensitivity(J_a, J_b)
    J_q = reduced_jacobian(J_a, J_b, dsdq)

    q_kept = solution.q.reshape(-1, 3)[keep_idx].ravel()
    R = _triangularize_with_gauge_fill(J_q, q_kept)

    return CompressedMap(
        anchor_ids=tuple(corr.global_ids[g] for g in keep),
        q0=q_kept,
        a=solution.a_bar,
        R=R,
        eta_res=sum(c.eta_res for c in cmaps),
        d_dof=sum(c.d_dof for c in cmaps) - dof_delta(corr, len(cmaps)),
    )


def _rekey_to_global(cmap: CompressedMap, corr, k) -> CompressedMap:
    """The same footprint with anchor_ids renamed to global track ids."""
    ids = tuple(corr.global_ids[g] for g in corr.projections[k])
    return CompressedMap(
        anchor_ids=ids,
        q0=cmap.q0,
        a=cmap.a,
        R=cmap.R,
        eta_res=cmap.eta_res,
        d_dof=cmap.d_dof,
    )


def robust_hierarchical_merge(
    cmaps,
    corr,
    sigma: float,
    level: float,
    opts: BundleOptions | None = None,
):
    """Incremental merge with a per-step consistency test.

    Maps are added one at a time in input order.  Each step merges the
    running footprint with the next map, computes that step's residual
    excess a_tilde, and tests it against its distribution at the given
    significance level; a rejected map is excluded and reported.  The
    final solution covers the accepted maps only, expressed in map 0's
    frame, with q ordered by first appearance of the global ids over the
    accepted maps.  ``level`` may be 1.0 to disable rejection entirely.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    _check_inputs(cmaps, corr)

    current = _rekey_to_global(cmaps[0], corr, 0)
    transforms = [SimilarityTransform.identity()]
    flagged: list[int] = []
    last_report = BundleReport(
        squared_residual=current.a**2,
        gradient_norm=0.0,
        iterations=0,
        converged=True,
    )
    for k in range(1, len(cmaps)):
        incoming_ids = [corr.global_ids[g] for g in corr.projections[k]]
        pair_corr = Correspondences.from_anchor_ids(
            [current.anchor_ids, incoming_ids]
        )
        n_shared = int(np.sum(pair_corr.shared_counts() == 2))
        if n_shared < 3:
            raise InsufficientOverlap(
                f"map {k} shares fewer than 3 anchors with the maps merged "
                "so far",
                map_index=k,
            )
        solution = merge_bundle([current, cmaps[k]], pair_corr, opts)
        a_tilde = solution.a_bar**2 - current.a**2 - cmaps[k].a ** 2
        if level < 1:
            params = gamma_params(sigma, dof_delta(pair_corr, 2))
            if change_test(a_tilde, params, level).rejected:
                flagged.append(k)
                continue
        current = recompress_merge([current, cmaps[k]], pair_corr, solution)
        transforms.append(solution.transforms[1])
        last_report = solution.report

    final = MergeSolution(
        q=current.q0,
        transforms=tuple(transforms),
        a_bar=current.a,
        report=last_report,
    )
    return final, flagged
