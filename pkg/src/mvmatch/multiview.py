"""Multi-view pose pipeline: pairwise poses, spanning tree, averaging, global BA, AUC."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from . import matcher as mt
from . import posesolver as ps
from .errors import (
    CollinearityError,
    DisconnectedGraphError,
    MvMatchError,
)

log = logging.getLogger(__name__)

AUC_THRESHOLDS = (5.0, 10.0, 20.0)
FAIL_DEG = 180.0
ROT_AVG_ITERS = 100
ROT_AVG_TOL = 1e-9
ROBUST_SCALE = 0.2  # chordal distance, about 8 degrees


# -- metrics -------------------------------------------------------------------

def auc(errors: Sequence[float], thresholds: Sequence[float] = AUC_THRESHOLDS) -> list:
    """Area under the recall-vs-error curve up to each threshold, in percent.

    The recall curve runs linearly through (0, 0) and (e_k, k/n) for the
    sorted errors below the threshold, then stays flat up to the threshold.
    Non-finite errors count as 180.
    """
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        return [0.0 for _ in thresholds]
    e = np.sort(np.where(np.isfinite(e), e, FAIL_DEG))
    if np.any(e < 0):
        raise ValueError("pose errors must be nonnegative")
    xs = np.r_[0.0, e]
    ys = np.r_[0.0, np.arange(1, e.size + 1) / e.size]
    out = []
    for th in thresholds:
        k = int(np.searchsorted(xs, th))
        x = np.r_[xs[:k], th]
        y = np.r_[ys[:k], ys[k - 1]]
        out.append(float(np.sum(np.diff(x) * (y[1:] + y[:-1])) / 2.0 / th * 100.0))
    return out


@dataclass
class AUCReport:
    thresholds: list
    pose_auc: list  # on max(rotation, translation) error
    transl_auc: list
    rot_auc: list
    errors: list  # [tuple, a, b, rotation_deg, translation_deg]
    diagnostics: list = field(default_factory=list)

    @classmethod
    def from_errors(cls, errors: list, thresholds=AUC_THRESHOLDS, diagnostics=None) -> "AUCReport":
        rot = [e[3] for e in errors]
        tr = [e[4] for e in errors]
        worst = [max(r, t) for r, t in zip(rot, tr)]
        th = list(thresholds)
        return cls(th, auc(worst, th), auc(tr, th), auc(rot, th), errors, list(diagnostics or []))

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds, "pose_auc": self.pose_auc,
                "transl_auc": self.transl_auc, "rot_auc": self.rot_auc,
                "errors": self.errors, "diagnostics": self.diagnostics}


# -- pose graph ------------------------------------------------------------------

@dataclass
class Edge:
    a: int
    b: int
    pose: geo.RelativePose  # camera a -> camera b, unit translation
    inliers: int
    matches: mt.PairMatches
    inlier_mask: np.ndarray


@dataclass
class PoseGraph:
    intrinsics: list
    edges: dict  # (a, b) -> Edge
    absolute: list = field(default_factory=list)  # world -> camera, frame 0 identity
    tree: list = field(default_factory=list)
    rotation_converged: bool = True
    rotation_residual: float = 0.0
    tree_translations: bool = False  # directions could not fix the scales; centres come from the tree

    @property
    def n(self) -> int:
        return len(self.intrinsics)


def _normalized(intr: geo.CameraIntrinsics, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = np.concatenate([x, np.ones((len(x), 1))], 1) @ intr.K_inv.T
    return h[:, :2] / h[:, 2:]


def inlier_mask(pose: geo.RelativePose, xa, xb, intr_a, intr_b,
                threshold: float = geo.EPIPOLAR_THRESHOLD) -> np.ndarray:
    """Matches whose symmetric epipolar distance (normalized coordinates) is below ``threshold``."""
    if len(xa) == 0:
        return np.zeros(0, dtype=bool)
    E = geo.essential_from(pose.R, pose.t)
    d = geo.symmetric_epipolar_distance(E, _normalized(intr_a, xa), _normalized(intr_b, xb))
    return np.atleast_1d(d) < threshold


def two_view_pose(xa, xb, w, intr_a, intr_b, solver: str = "8pt+ba", T: int = ps.T_TEST,
                  beta0: float = ps.BETA0) -> geo.RelativePose:
    """Weighted eight-point plus cheirality, optionally refined by BA.

    A failed BA falls back to the eight-point pose.
    """
    m = ps.WeightedMatches(np.asarray(xa, float), np.asarray(xb, float), np.asarray(w, float))
    with dc.no_grad():
        F = ps.weighted_eight_point(m)
        pose = ps.recover_pose(F, m, intr_a, intr_b)
        if solver == "8pt":
            return pose
        if solver != "8pt+ba":
            raise ValueError(f"unknown solver {solver!r}")
        try:
            return ps.bundle_adjust(pose, m, intr_a, intr_b, T, beta0).pose
        except MvMatchError as exc:
            log.debug("bundle adjustment failed (%s); keeping eight-point pose", exc)
            return pose


def pairwise_poses(frames, matches: mt.MatchSet, solver: str = "8pt+ba", T: int = ps.T_TEST,
                   beta0: float = ps.BETA0) -> tuple:
    """Relative pose and inlier count per pair; returns (edges, diagnostics)."""
    edges, diag = {}, []
    for (a, b), pm in sorted(matches.pairs.items()):
        if len(pm) < 8:
            diag.append({"pair": [a, b], "reason": f"{len(pm)} matches (< 8)"})
            continue
        fa, fb = frames[a], frames[b]
        xa, xb = fa.keypoints.coords[pm.idx_a], fb.keypoints.coords[pm.idx_b]
        try:
            pose = two_view_pose(xa, xb, pm.weights, fa.intrinsics, fb.intrinsics, solver, T, beta0)
        except MvMatchError as exc:
            diag.append({"pair": [a, b], "reason": f"{type(exc).__name__}: {exc}"})
            continue
        mask = inlier_mask(pose.pose, xa, xb, fa.intrinsics, fb.intrinsics)
        edges[(a, b)] = Edge(a, b, pose, int(mask.sum()), pm, mask)
    return edges, diag


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def components(n: int, edges) -> list:
    uf = _UnionFind(n)
    for a, b in edges:
        uf.union(a, b)
    groups = {}
    for v in range(n):
        groups.setdefault(uf.find(v), []).append(v)
    return sorted(groups.values())


def max_spanning_tree(n: int, edges: dict) -> tuple:
    """Kruskal on inlier counts (ties broken by edge key order); returns (tree, absolute poses).

    Absolute rotations are composed from frame 0 along the tree; translations
    are composed as well but carry the per-edge unit-scale ambiguity.
    """
    comps = components(n, edges)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    uf = _UnionFind(n)
    tree = []
    for key in sorted(edges, key=lambda k: (-edges[k].inliers, k)):
        if uf.union(*key):
            tree.append(key)
    adj = {v: [] for v in range(n)}
    for a, b in tree:
        adj[a].append(b)
        adj[b].append(a)
    absolute = [None] * n
    absolute[0] = geo.Pose.identity()
    stack = [0]
    while stack:
        u = stack.pop()
        for v in sorted(adj[u]):
            if absolute[v] is not None:
                continue
            rel = edges[(u, v)].pose.pose if (u, v) in edges else edges[(v, u)].pose.pose.inverse()
            absolute[v] = rel.compose(absolute[u])
            stack.append(v)
    return tree, absolute


def rotation_residuals(edges: dict, Rs: Sequence[np.ndarray]) -> dict:
    return {(a, b): float(np.linalg.norm(Rs[b] - e.pose.R @ Rs[a])) for (a, b), e in edges.items()}


def _robust_cost(edges: dict, Rs: list, scale: float) -> float:
    res = rotation_residuals(edges, Rs)
    return sum(e.inliers * scale ** 2 * res[k] ** 2 / (scale ** 2 + res[k] ** 2) for k, e in edges.items())


def _chordal_step(n: int, edges: dict, Rs: list, w: dict, alpha: float = 1.0) -> list:
    """One Gauss-Newton step on sum w_ab |R_b - R_ab R_a|_F^2 with left perturbations, frame 0 held."""
    basis = [geo.hat(e) for e in np.eye(3)]
    rows, rhs = [], []
    for (a, b), e in edges.items():
        s = np.sqrt(w[(a, b)])
        J = np.zeros((9, 3 * n))
        for k, B in enumerate(basis):
            J[:, 3 * b + k] = (B @ Rs[b]).ravel()
            J[:, 3 * a + k] = -(e.pose.R @ B @ Rs[a]).ravel()
        rows.append(s * J[:, 3:])
        rhs.append(-s * (Rs[b] - e.pose.R @ Rs[a]).ravel())
    d, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    d = np.r_[np.zeros(3), d].reshape(n, 3)
    return [geo.so3_exp(alpha * di) @ R for di, R in zip(d, Rs)]


def rotation_averaging(n: int, edges: dict, init: Sequence[np.ndarray], max_iter: int = ROT_AVG_ITERS,
                       tol: float = ROT_AVG_TOL, robust_scale: float = ROBUST_SCALE) -> tuple:
    """IRLS chordal averaging; returns (rotations, converged, final weighted residual).

    Edge weights are inlier count times a Geman-McClure factor of the
    current chordal residual; each iteration takes one Gauss-Newton step on
    the weighted chordal cost with frame 0 held at its initial value, halved
    until the Geman-McClure cost does not increase.  The
    kernel scale starts at the largest possible chordal distance and halves
    every iteration down to ``robust_scale`` (graduated non-convexity), so a
    bad edge in the initial tree cannot lock in.  The loop stops once the
    scale has settled and the largest rotation change drops below ``tol``.
    """
    Rs = [np.asarray(R, dtype=float) for R in init]
    G = Rs[0].T
    Rs = [R @ G for R in Rs]
    if n == 1 or not edges:
        return Rs, True, 0.0
    converged = False
    scale = 2.0 * np.sqrt(2.0)
    for _ in range(max_iter):
        res = rotation_residuals(edges, Rs)
        w = {k: e.inliers / (1.0 + (res[k] / scale) ** 2) ** 2 for k, e in edges.items()}
        before = _robust_cost(edges, Rs, scale)
        alpha = 1.0
        new = _chordal_step(n, edges, Rs, w)
        while _robust_cost(edges, new, scale) > before and alpha > 1e-4:
            alpha /= 2.0
            new = _chordal_step(n, edges, Rs, w, alpha)
        change = max(np.linalg.norm(x - y) for x, y in zip(new, Rs))
        Rs = new
        if scale > robust_scale:
            scale = max(robust_scale, scale / 2.0)
        elif change < tol:
            converged = True
            break
    res = rotation_residuals(edges, Rs)
    final = float(np.sqrt(sum(e.inliers * res[k] ** 2 for k, e in edges.items())))
    if not converged:
        log.warning("rotation averaging stopped after %d iterations (residual %.3g)", max_iter, final)
    return Rs, converged, final


def translation_averaging(n: int, edges: dict, rotations: Sequence[np.ndarray], rank_tol: float = 1e-9) -> np.ndarray:
    """Camera centres from edge directions; c_0 = 0 and sum of |c_i| = 1.

    Each edge asks ``c_b - c_a`` to be parallel to ``-R_b^T t_ab``.
    """
    if n < 2:
        return np.zeros((n, 3))
    A = np.zeros((3 * len(edges), 3 * n))
    dirs = []
    for r, ((a, b), e) in enumerate(sorted(edges.items())):
        d = -rotations[b].T @ e.pose.t
        d = d / np.linalg.norm(d)
        dirs.append((a, b, d))
        S = np.sqrt(e.inliers) * geo.hat(d)
        A[3 * r:3 * r + 3, 3 * b:3 * b + 3] = S
        A[3 * r:3 * r + 3, 3 * a:3 * a + 3] = -S
    A = A[:, 3:]
    _, s, Vt = np.linalg.svd(A)
    if A.shape[0] < A.shape[1] or s[-2] <= rank_tol * s[0]:
        raise CollinearityError("translation directions leave more than the global scale undetermined")
    c = np.vstack([np.zeros(3), Vt[-1].reshape(n - 1, 3)])
    if sum(np.sign(d @ (c[b] - c[a])) for a, b, d in dirs) < 0:
        c = -c
    return c / np.sum(np.linalg.norm(c, axis=1))


# -- tracks and global BA ------------------------------------------------------------

def build_tracks(n_frames: int, sizes: Sequence[int], links: Sequence[tuple]) -> list:
    """Group (frame, keypoint) observations linked by matches into tracks.

    ``links`` holds (a, i, b, j, confidence).  Links are merged strongest
    first and a link that would put two keypoints of one frame into one
    track is skipped, which splits inconsistent tracks at their weakest link.
    Returns tracks with at least two observations as sorted (frame, kp) lists.
    """
    offset = np.r_[0, np.cumsum(sizes)]
    uf = _UnionFind(int(offset[-1]))
    frames_of = {v: {f} for f in range(n_frames) for v in range(offset[f], offset[f + 1])}
    for a, i, b, j, _ in sorted(links, key=lambda l: (-l[4], l[0], l[1], l[2], l[3])):
        u, v = uf.find(int(offset[a] + i)), uf.find(int(offset[b] + j))
        if u == v or frames_of[u] & frames_of[v]:
            continue
        uf.union(u, v)
        root = uf.find(u)
        frames_of[root] = frames_of[u] | frames_of[v]
    groups = {}
    for f in range(n_frames):
        for k in range(sizes[f]):
            groups.setdefault(uf.find(int(offset[f] + k)), []).append((f, k))
    return [sorted(g) for g in sorted(groups.values()) if len(g) >= 2]


def global_bundle_adjust(graph: PoseGraph, frames, T: int = ps.T_TEST, beta0: float = ps.BETA0) -> list:
    """Refine all absolute poses (frame 0 fixed) with tracks from inlier matches.

    Observation weights are the strongest match confidence touching the keypoint.
    """
    links, conf = [], {}
    for (a, b), e in sorted(graph.edges.items()):
        pm = e.matches
        for i, j, w, ok in zip(pm.idx_a, pm.idx_b, pm.weights, e.inlier_mask):
            if ok and w > 0:
                links.append((a, int(i), b, int(j), float(w)))
                conf[(a, int(i))] = max(conf.get((a, int(i)), 0.0), float(w))
                conf[(b, int(j))] = max(conf.get((b, int(j)), 0.0), float(w))
    tracks = build_tracks(graph.n, [len(f.keypoints) for f in frames], links)
    poses = graph.absolute
    Y, cam, pt, xy, w = [], [], [], [], []
    for tr in tracks:
        px = [frames[f].keypoints.coords[k] for f, k in tr]
        try:
            X = geo.triangulate_multiview([poses[f] for f, _ in tr], px, [graph.intrinsics[f] for f, _ in tr])
        except MvMatchError:
            continue
        if any(poses[f].apply(X)[2] <= geo.MIN_DEPTH for f, _ in tr):
            continue
        for (f, k), x in zip(tr, px):
            cam.append(f)
            pt.append(len(Y))
            xy.append(x)
            w.append(conf[(f, k)])
        Y.append(X)
    if not Y:
        raise ps.DegenerateConfigurationError("no triangulable track for global bundle adjustment")
    obs = ps.Observations(np.array(cam), np.array(pt), np.array(xy), np.array(w), graph.intrinsics)
    with dc.no_grad():
        res = ps.gauss_newton([p.R for p in poses], [p.t for p in poses], np.array(Y), obs, T, beta0, fixed=(0,))
    out = [poses[0]]
    for c in range(1, graph.n):
        out.append(geo.Pose(np.array(res.Rs[c].data), np.array(res.ts[c].data)))
    return out


# -- pipeline -------------------------------------------------------------------------

def multiview_poses(frames, matches: mt.MatchSet, solver: str = "8pt+ba", T: int = ps.T_TEST,
                    global_ba: bool = True, beta0: float = ps.BETA0) -> PoseGraph:
    """Absolute poses for one tuple from its pairwise matches."""
    n = len(frames)
    edges, diag = pairwise_poses(frames, matches, solver, T, beta0)
    for d in diag:
        log.debug("pair dropped: %s", d)
    tree, absolute = max_spanning_tree(n, edges)
    graph = PoseGraph([f.intrinsics for f in frames], edges, absolute, tree)
    Rs, graph.rotation_converged, graph.rotation_residual = rotation_averaging(n, edges, [p.R for p in absolute])
    try:
        centres = translation_averaging(n, edges, Rs)
    except CollinearityError as exc:
        # e.g. a tree-shaped pair graph: fall back to the unit baselines chained along the tree
        log.debug("translation averaging: %s; using tree centres", exc)
        centres = np.array([p.center for p in absolute])
        total = np.sum(np.linalg.norm(centres, axis=1))
        centres = centres / total if total > 0 else centres
        graph.tree_translations = True
    graph.absolute = [geo.Pose(R, -R @ c) for R, c in zip(Rs, centres)]
    graph.absolute[0] = geo.Pose.identity()
    if global_ba and n > 1:
        try:
            graph.absolute = global_bundle_adjust(graph, frames, T, beta0)
        except MvMatchError as exc:
            log.debug("global bundle adjustment failed (%s); keeping averaged poses", exc)
    return graph


def oracle_matches(sample) -> mt.MatchSet:
    """Ground-truth label matches with unit weights (pipeline upper bound)."""
    pairs = {}
    for (a, b), lab in sample.labels.items():
        m = lab.matches
        pairs[(a, b)] = mt.PairMatches(a, b, m[:, 0], m[:, 1], np.ones(len(m)), np.ones(len(m)))
    return mt.MatchSet(pairs)


@dataclass(frozen=True)
class EvalConfig:
    pipeline: str = "multiview"  # or "two_view"
    mode: str = "joint"
    solver: str = "8pt+ba"
    T: int = ps.T_TEST
    beta0: float = ps.BETA0
    conf_threshold: float | None = None
    thresholds: tuple = AUC_THRESHOLDS
    oracle: bool = False


def _pair_errors(sample, poses) -> list:
    out = []
    for a, b in sample.pairs:
        err = geo.pose_error(geo.relative_pose(poses[a], poses[b]), sample.relative_gt(a, b))
        out.append((a, b, err.rotation_deg, err.translation_deg if err.translation_defined else FAIL_DEG))
    return out


def evaluate_tuple(sample, weights: mt.MatcherWeights | None, config: EvalConfig) -> tuple:
    """Pairwise errors for one tuple; returns (rows of (a, b, rot, trans), diagnostics)."""
    if config.oracle:
        matches = oracle_matches(sample)
    else:
        matches = mt.match_tuple([f.keypoints for f in sample.frames], weights, config.mode, config.conf_threshold)
    frames = sample.frames
    if config.pipeline == "two_view":
        rows, diag = [], []
        for a, b in sample.pairs:
            pm = matches.pairs.get((a, b))
            try:
                if pm is None or len(pm) < 8:
                    raise ps.DegenerateConfigurationError(f"{0 if pm is None else len(pm)} matches (< 8)")
                pose = two_view_pose(frames[a].keypoints.coords[pm.idx_a], frames[b].keypoints.coords[pm.idx_b],
                                     pm.weights, frames[a].intrinsics, frames[b].intrinsics, config.solver, config.T,
                                     config.beta0)
                err = geo.pose_error(pose, sample.relative_gt(a, b))
                rows.append((a, b, err.rotation_deg, err.translation_deg if err.translation_defined else FAIL_DEG))
            except MvMatchError as exc:
                diag.append({"pair": [a, b], "reason": f"{type(exc).__name__}: {exc}"})
                rows.append((a, b, FAIL_DEG, FAIL_DEG))
        return rows, diag
    if config.pipeline != "multiview":
        raise ValueError(f"unknown pipeline {config.pipeline!r}")
    try:
        graph = multiview_poses(frames, matches, config.solver, config.T, beta0=config.beta0)
    except MvMatchError as exc:
        return ([(a, b, FAIL_DEG, FAIL_DEG) for a, b in sample.pairs],
                [{"reason": f"{type(exc).__name__}: {exc}"}])
    diag = [] if graph.rotation_converged else [{"reason": "rotation averaging did not converge",
                                                 "residual": graph.rotation_residual}]
    return _pair_errors(sample, graph.absolute), diag


def _eval_job(args):
    return evaluate_tuple(*args)


def evaluate_tuples(dataset, weights: mt.MatcherWeights | None, config: EvalConfig = EvalConfig(),
                    jobs: int = 1) -> AUCReport:
    """Run the pose pipeline on every tuple and report AUC over all pairs."""
    tuples = dataset.tuples if hasattr(dataset, "tuples") else list(dataset)
    args = [(s, weights, config) for s in tuples]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_eval_job, args))
    else:
        results = [_eval_job(a) for a in args]
    errors, diags = [], []
    for k, (rows, diag) in enumerate(results):
        errors.extend([k, a, b, float(r), float(t)] for a, b, r, t in rows)
        diags.extend(dict(d, tuple=k) for d in diag)
    return AUCReport.from_errors(errors, config.thresholds, diags)
