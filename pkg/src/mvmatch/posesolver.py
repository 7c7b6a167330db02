"""Differentiable two-view pose: weighted eight-point and Gauss-Newton BA.

Everything here is written against :mod:`mvmatch.diffcore` so gradients
reach match coordinates and confidence weights.  The bundle adjuster is
generic over N cameras (camera 0 fixed) and is reused for global BA.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .errors import (
    BehindCameraError,
    DegenerateConfigurationError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)

log = logging.getLogger(__name__)

BETA0 = 0.1
BETA_DECREASE = 3.5
BETA_INCREASE = 1.5
T_TRAIN = 5
T_TEST = 10


@dataclass
class WeightedMatches:
    """Correspondences ``x`` (image a) <-> ``x_prime`` (image b) with weights ``w``."""

    x: object
    x_prime: object
    w: object = None

    def __post_init__(self):
        n = len(self.x)
        if self.w is None:
            self.w = np.ones(n)
        if len(self.x_prime) != n or len(self.w) != n:
            raise ShapeError("WeightedMatches", np.shape(self.x), np.shape(self.x_prime), np.shape(self.w))
        w = _data(self.w)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")

    def __len__(self):
        return len(self.x)

    @property
    def w_data(self) -> np.ndarray:
        return _data(self.w)

    def subset(self, idx) -> "WeightedMatches":
        idx = np.asarray(idx)
        return WeightedMatches(_take(self.x, idx), _take(self.x_prime, idx), _take(self.w, idx))

    def is_tensor(self) -> bool:
        return any(isinstance(v, dc.Tensor) for v in (self.x, self.x_prime, self.w))


def _take(v, idx):
    return v[idx] if isinstance(v, dc.Tensor) else np.asarray(v)[idx]


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, dc.Tensor) else np.asarray(v, dtype=float)


# -- weighted eight-point ----------------------------------------------------

def normalize_points(points, weights=None):
    """Similarity normalization: centroid at the origin, mean distance sqrt(2).

    With ``weights`` the centroid and mean distance are weighted averages,
    so zero-weight points have no influence.  Returns ``(normalized, T)``.
    """
    keep = isinstance(points, dc.Tensor) or isinstance(weights, dc.Tensor)
    pts = dc.as_tensor(points)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ShapeError("normalize_points", pts.shape)
    w = dc.tensor(np.ones(pts.shape[0])) if weights is None else dc.as_tensor(weights)
    wsum = dc.tsum(w)
    if wsum.item() <= 0:
        raise DegenerateConfigurationError("all weights are zero")
    centroid = dc.tsum(pts * w[:, None], 0) / wsum
    diff = pts - centroid
    dist2 = dc.tsum(diff * diff, 1)
    spread = float(np.sum(w.data * dist2.data))
    if spread <= 1e-24 * max(1.0, float(np.max(np.abs(pts.data)))) ** 2:
        raise DegenerateConfigurationError("points have zero spread")
    nonzero = dist2.data > 0
    dist = dc.sqrt(dist2 + dc.tensor(np.where(nonzero, 0.0, 1.0))) * dc.tensor(nonzero.astype(float))
    scale = np.sqrt(2.0) * wsum / dc.tsum(w * dist)
    normalized = diff * scale
    zero, one = scale * 0.0, scale * 0.0 + 1.0
    T = dc.stack([
        dc.stack([scale, zero, -scale * centroid[0]]),
        dc.stack([zero, scale, -scale * centroid[1]]),
        dc.stack([zero, zero, one]),
    ])
    if keep:
        return normalized, T
    return np.array(normalized.data), np.array(T.data)


def design_matrix(xa: dc.Tensor, xb: dc.Tensor) -> dc.Tensor:
    """Rows ``[x x', x y', x, y x', y y', y, x', y', 1]`` for column-major flat(F)."""
    x, y = xa[:, 0], xa[:, 1]
    xp, yp = xb[:, 0], xb[:, 1]
    one = x * 0.0 + 1.0
    return dc.stack([x * xp, x * yp, x, y * xp, y * yp, y, xp, yp, one], 1)


def enforce_rank2(F: dc.Tensor) -> dc.Tensor:
    """Remove the smallest singular component: ``F - u3 u3^T F v3 v3^T``."""
    v3 = dc.svd_min_singular_vector(F)
    u3 = dc.svd_min_singular_vector(dc.transpose(F))
    sigma = dc.tsum(u3 * dc.matmul(F, v3))
    return F - sigma * (u3[:, None] * v3[None, :])


def weighted_eight_point(matches: WeightedMatches):
    """Unit-Frobenius fundamental matrix with ``x'^T F x = 0``.

    Minimizes ``||diag(w) A flat(F)||`` over unit vectors on Hartley
    normalized coordinates, then projects to rank 2 and denormalizes.
    """
    keep = matches.is_tensor()
    if len(matches) < 8:
        raise DegenerateConfigurationError(f"eight-point needs >= 8 matches, got {len(matches)}")
    if np.count_nonzero(matches.w_data > 0) < 8:
        raise DegenerateConfigurationError("eight-point needs >= 8 matches with positive weight")
    w = dc.as_tensor(matches.w)
    xa, Ta = normalize_points(dc.as_tensor(matches.x), w)
    xb, Tb = normalize_points(dc.as_tensor(matches.x_prime), w)
    A = design_matrix(xa, xb) * w[:, None]
    f = dc.svd_min_singular_vector(A)
    F_hat = dc.transpose(dc.reshape(f, (3, 3)))  # column-major
    F2 = enforce_rank2(F_hat)
    F = dc.matmul(dc.matmul(dc.transpose(Tb), F2), Ta)
    F = F / dc.norm(F)
    return F if keep else np.array(F.data)


# -- pose recovery -----------------------------------------------------------

def cofactor(M: dc.Tensor) -> dc.Tensor:
    a, b, c = M[:, 0], M[:, 1], M[:, 2]
    cross = lambda u, v: dc.matmul(dc.skew(u), v)
    return dc.stack([cross(b, c), cross(c, a), cross(a, b)], 1)


def polar_rotation(M: dc.Tensor, tol: float = 1e-14, max_iter: int = 60) -> dc.Tensor:
    """Orthogonal polar factor by Newton iteration ``Y <- (Y + Y^-T) / 2``."""
    Y = M
    for _ in range(max_iter):
        C = cofactor(Y)
        det = dc.tsum(Y[:, 0] * C[:, 0])
        Y_next = (Y + C / det) * 0.5
        step = np.max(np.abs(Y_next.data - Y.data))
        Y = Y_next
        if step < tol:
            break
    return Y


def _polar_np(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


@dataclass
class PoseEstimate:
    """A recovered relative pose, optionally still attached to the tape."""

    R: object
    t: object
    index: int
    candidates: list = field(repr=False, default_factory=list)

    @property
    def relative(self) -> geo.RelativePose:
        return geo.RelativePose(geo.Pose(np.array(_data(self.R)), np.array(_data(self.t))))


def recover_pose_t(F, matches: WeightedMatches | None, intr_a: geo.CameraIntrinsics,
                   intr_b: geo.CameraIntrinsics, mode: str = "cheirality",
                   gt: geo.RelativePose | None = None) -> PoseEstimate:
    """Pose from F with the chosen candidate rebuilt on the tape.

    Selection runs on plain arrays (non-differentiable branch); the selected
    candidate is re-expressed as ``t = smallest left singular vector of E``
    and ``R = polar(cof(E) +/- [t]x E)`` so gradients flow through it.
    """
    if (mode == "closest_to_gt") != (gt is not None):
        raise ValueError("gt must be given exactly when mode is closest_to_gt")
    F = dc.as_tensor(F)
    E = dc.matmul(dc.matmul(intr_b.K.T, F), intr_a.K)
    E = E * (np.sqrt(2.0) / dc.norm(E))
    cands = geo.decompose_essential(geo.essential_from_fundamental(F.data, intr_a, intr_b))
    if mode == "closest_to_gt":
        k = geo.select_cheirality(cands, None, None, intr_a, intr_b, mode, gt)
    else:
        xa, xb = _data(matches.x), _data(matches.x_prime)
        live = matches.w_data > 0
        k = geo.select_cheirality(cands, xa[live], xb[live], intr_a, intr_b, mode)
    target = cands[k]
    t0 = dc.svd_min_singular_vector(dc.transpose(E))
    t = t0 if float(t0.data @ target.t) >= 0 else -t0
    cof = cofactor(E)
    tx_e = dc.matmul(dc.skew(t), E)
    best = None
    for sign in (-1.0, 1.0):
        raw = cof.data + sign * tx_e.data
        err = np.max(np.abs(_polar_np(raw) - target.R))
        if best is None or err < best[0]:
            best = (err, sign)
    R = polar_rotation(cof + best[1] * tx_e)
    return PoseEstimate(R, t, k, cands)


def recover_pose(F, matches: WeightedMatches | None, intr_a: geo.CameraIntrinsics,
                 intr_b: geo.CameraIntrinsics, mode: str = "cheirality",
                 gt: geo.RelativePose | None = None) -> geo.RelativePose:
    with dc.no_grad():
        return recover_pose_t(F, matches, intr_a, intr_b, mode, gt).relative


# -- bundle adjustment -------------------------------------------------------

@dataclass
class Observations:
    """Weighted pixel observations of points by cameras.

    Row order is the residual order; for two views it is point-major so
    residuals interleave ``r_1, r'_1, r_2, r'_2, ...``.
    """

    cam: np.ndarray
    point: np.ndarray
    xy: object
    w: object
    intrinsics: Sequence[geo.CameraIntrinsics]

    def __post_init__(self):
        self.cam = np.asarray(self.cam, dtype=int)
        self.point = np.asarray(self.point, dtype=int)
        fx = np.array([k.fx for k in self.intrinsics])
        fy = np.array([k.fy for k in self.intrinsics])
        cx = np.array([k.cx for k in self.intrinsics])
        cy = np.array([k.cy for k in self.intrinsics])
        self.fx, self.fy = fx[self.cam], fy[self.cam]
        self.cx, self.cy = cx[self.cam], cy[self.cam]

    @classmethod
    def two_view(cls, matches: WeightedMatches, intr_a, intr_b) -> "Observations":
        m = len(matches)
        xy = dc.reshape(dc.stack([dc.as_tensor(matches.x), dc.as_tensor(matches.x_prime)], 1), (2 * m, 2))
        w = dc.reshape(dc.stack([dc.as_tensor(matches.w), dc.as_tensor(matches.w)], 1), (2 * m,))
        return cls(np.tile([0, 1], m), np.repeat(np.arange(m), 2), xy, w, [intr_a, intr_b])

    def __len__(self):
        return len(self.cam)

    def without_points(self, bad) -> tuple:
        """Drop every observation of the points in ``bad``; returns (obs, kept point ids)."""
        n_points = int(self.point.max()) + 1
        keep_pt = np.setdiff1d(np.arange(n_points), bad)
        remap = -np.ones(n_points, dtype=int)
        remap[keep_pt] = np.arange(len(keep_pt))
        rows = np.flatnonzero(remap[self.point] >= 0)
        return Observations(self.cam[rows], remap[self.point[rows]], _take(self.xy, rows),
                            _take(self.w, rows), self.intrinsics), keep_pt


def _behind(u: dc.Tensor, obs: Observations) -> np.ndarray:
    return np.unique(obs.point[u.data[:, 2] <= geo.MIN_DEPTH])


def _camera_points(Rs: dc.Tensor, ts: dc.Tensor, Y: dc.Tensor, obs: Observations) -> dc.Tensor:
    R_obs = Rs[obs.cam]
    y_obs = Y[obs.point]
    return dc.reshape(dc.matmul(R_obs, y_obs[:, :, None]), (len(obs), 3)) + ts[obs.cam]


def _residuals(u: dc.Tensor, obs: Observations) -> dc.Tensor:
    uz = u[:, 2]
    bad = _behind(u, obs)
    if bad.size:
        raise BehindCameraError(f"points {bad.tolist()} behind a camera")
    px = u[:, 0] / uz * obs.fx + obs.cx
    py = u[:, 1] / uz * obs.fy + obs.cy
    proj = dc.stack([px, py], 1)
    w = dc.as_tensor(obs.w)
    return dc.reshape((proj - obs.xy) * w[:, None], (2 * len(obs),))


def _jacobian(u: dc.Tensor, Rs: dc.Tensor, obs: Observations, free: np.ndarray, n_points: int) -> dc.Tensor:
    """Dense Jacobian; columns are [poses of free cameras | points]."""
    n_obs = len(obs)
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    inv = 1.0 / uz
    zero = ux * 0.0
    w = dc.as_tensor(obs.w)
    jpi = dc.stack([
        dc.stack([inv * obs.fx, zero, -(ux * inv * inv) * obs.fx], -1),
        dc.stack([zero, inv * obs.fy, -(uy * inv * inv) * obs.fy], -1),
    ], -2) * w[:, None, None]  # (O, 2, 3)
    slot = -np.ones(Rs.shape[0], dtype=int)
    slot[free] = np.arange(len(free))
    n_cols = 6 * len(free) + 3 * n_points
    rows = 2 * np.arange(n_obs)[:, None] + np.arange(2)[None, :]  # (O, 2)

    point_vals = dc.matmul(jpi, Rs[obs.cam])  # (O, 2, 3)
    pc = 6 * len(free) + 3 * obs.point[:, None] + np.arange(3)[None, :]
    idx_r = np.broadcast_to(rows[:, :, None], (n_obs, 2, 3))
    idx_c = np.broadcast_to(pc[:, None, :], (n_obs, 2, 3))
    J = dc.scatter((2 * n_obs, n_cols), (idx_r, idx_c), point_vals)

    has_pose = slot[obs.cam] >= 0
    if np.any(has_pose):
        sel = np.flatnonzero(has_pose)
        eye = np.broadcast_to(np.eye(3), (len(sel), 3, 3))
        lift = dc.concat([dc.tensor(eye), -dc.skew(u[sel])], 2)  # [I | -u^]
        pose_vals = dc.matmul(jpi[sel], lift)  # (S, 2, 6)
        cc = 6 * slot[obs.cam[sel]][:, None] + np.arange(6)[None, :]
        idx_r = np.broadcast_to(rows[sel][:, :, None], (len(sel), 2, 6))
        idx_c = np.broadcast_to(cc[:, None, :], (len(sel), 2, 6))
        J = J + dc.scatter((2 * n_obs, n_cols), (idx_r, idx_c), pose_vals)
    return J


def _as_pose_tensors(p, R=None, t=None):
    if p is not None:
        R, t = geo.se3_exp_t(dc.as_tensor(p))
    return dc.as_tensor(R), dc.as_tensor(t)


def ba_residuals(p, Y, matches: WeightedMatches, intr_a, intr_b, R=None, t=None):
    """Weighted reprojection residuals, ordered ``[r_1, r'_1, ..., r_M, r'_M]``.

    The pose is the 6-vector ``p`` or, when ``p`` is None, ``R`` and ``t``.
    """
    keep = isinstance(p, dc.Tensor) or isinstance(Y, dc.Tensor) or matches.is_tensor()
    R, t = _as_pose_tensors(p, R, t)
    Rs = dc.stack([dc.tensor(np.eye(3)), R])
    ts = dc.stack([dc.tensor(np.zeros(3)), t])
    obs = Observations.two_view(matches, intr_a, intr_b)
    r = _residuals(_camera_points(Rs, ts, dc.as_tensor(Y), obs), obs)
    return r if keep else np.array(r.data)


def ba_jacobian(p, Y, matches: WeightedMatches, intr_a, intr_b):
    """4M x (6 + 3M) Jacobian of :func:`ba_residuals` (left se(3) perturbation)."""
    keep = isinstance(p, dc.Tensor) or isinstance(Y, dc.Tensor) or matches.is_tensor()
    R, t = _as_pose_tensors(p)
    Y = dc.as_tensor(Y)
    Rs = dc.stack([dc.tensor(np.eye(3)), R])
    ts = dc.stack([dc.tensor(np.zeros(3)), t])
    obs = Observations.two_view(matches, intr_a, intr_b)
    u = _camera_points(Rs, ts, Y, obs)
    J = _jacobian(u, Rs, obs, np.array([1]), Y.shape[0])
    return J if keep else np.array(J.data)


@dataclass
class GNResult:
    Rs: list
    ts: list
    Y: dc.Tensor
    beta: float
    residual_norms: list
    steps: list
    point_ids: np.ndarray
    obs: Observations


def gauss_newton(Rs: Sequence, ts: Sequence, Y, obs: Observations, iters: int,
                 beta0: float = BETA0, fixed: Sequence[int] = (0,)) -> GNResult:
    """Damped, Jacobi-preconditioned Gauss-Newton over cameras and points.

    Each iteration solves ``(H + beta diag(H)) dz = -J^T r`` with
    ``H = J^T J``; poses are updated by left composition with exp(dp) and
    points additively.  ``beta`` is divided by 3.5 when the residual norm
    drops and multiplied by 1.5 otherwise; no step is rejected.  A point
    that a step moves behind a camera leaves the problem; ``point_ids``
    lists the survivors.
    """
    n_cams = len(Rs)
    free = np.array([c for c in range(n_cams) if c not in set(fixed)], dtype=int)
    Rs = [dc.as_tensor(R) for R in Rs]
    ts = [dc.as_tensor(t) for t in ts]
    Y = dc.as_tensor(Y)
    ids = np.arange(Y.shape[0])
    beta = float(beta0)

    def evaluate(Rs, ts, Y, obs):
        R_all, t_all = dc.stack(Rs), dc.stack(ts)
        u = _camera_points(R_all, t_all, Y, obs)
        return _residuals(u, obs), _jacobian(u, R_all, obs, free, Y.shape[0])

    r, J = evaluate(Rs, ts, Y, obs)
    norms = [float(np.linalg.norm(r.data))]
    steps = []
    for it in range(iters):
        try:
            Jt = dc.transpose(J)
            H = dc.matmul(Jt, J)
            g = dc.matmul(Jt, r)
            Hd = H + H * (beta * np.eye(H.shape[0]))
            d = np.diag(Hd.data)
            if np.any(d <= 0):
                raise DegenerateConfigurationError(
                    f"unconstrained parameters {np.flatnonzero(d <= 0).tolist()}")
            s = 1.0 / np.sqrt(d)
            y = dc.linear_solve(Hd * np.outer(s, s), -(g * s))
            dz = y * s
            steps.append(float(np.max(np.abs(dz.data))) if dz.data.size else 0.0)
            Rs, ts = list(Rs), list(ts)
            for k, c in enumerate(free):
                dR, dt = geo.se3_exp_t(dz[6 * k:6 * k + 6])
                Rs[c] = dc.matmul(dR, Rs[c])
                ts[c] = dc.matmul(dR, ts[c]) + dt
            Y = Y + dc.reshape(dz[6 * len(free):], Y.shape)
            prev = r
            with dc.no_grad():
                bad = _behind(_camera_points(dc.stack(Rs), dc.stack(ts), Y, obs), obs)
            if bad.size:
                if bad.size == len(ids):
                    raise BehindCameraError(f"iteration {it}: every point is behind a camera")
                log.debug("gauss_newton: iteration %d drops points %s", it, ids[bad].tolist())
                rows = np.flatnonzero(~np.isin(obs.point, bad))
                prev = prev.data.reshape(-1, 2)[rows]
                obs, keep = obs.without_points(bad)
                Y, ids = Y[keep], ids[keep]
            r, J = evaluate(Rs, ts, Y, obs)
        except NonFiniteError as exc:
            raise DivergenceError(it) from exc
        norms.append(float(np.linalg.norm(r.data)))
        beta = beta / BETA_DECREASE if norms[-1] < np.linalg.norm(_data(prev)) else beta * BETA_INCREASE
    return GNResult(Rs, ts, Y, beta, norms, steps, ids, obs)


@dataclass
class BAResult:
    pose: geo.RelativePose
    Y: np.ndarray
    R: dc.Tensor
    t: dc.Tensor
    Y_t: dc.Tensor
    kept: np.ndarray
    dropped: int
    gn: GNResult
    initial_energy: float
    final_energy: float
    initial_rmse: float
    final_rmse: float


def bundle_adjust(init, matches: WeightedMatches, intr_a: geo.CameraIntrinsics,
                  intr_b: geo.CameraIntrinsics, T: int = T_TEST, beta0: float = BETA0) -> BAResult:
    """Refine a two-view pose and the triangulated points of its matches.

    ``init`` is a RelativePose or a pair of tensors ``(R, t)``.  Matches with
    zero weight, or that triangulate behind either camera at the initial
    pose, are left out (``dropped`` counts the latter).
    """
    if isinstance(init, (geo.RelativePose, geo.Pose)):
        pose = init.pose if isinstance(init, geo.RelativePose) else init
        R0, t0 = dc.tensor(pose.R), dc.tensor(pose.t)
    else:
        R0, t0 = (dc.as_tensor(v) for v in init)
    live = np.flatnonzero(matches.w_data > 0)
    if live.size == 0:
        raise DegenerateConfigurationError("bundle adjustment needs a match with positive weight")
    sub = matches.subset(live)
    Y0, ok = geo.triangulate_batch(R0, t0, dc.as_tensor(sub.x), dc.as_tensor(sub.x_prime),
                                   intr_a, intr_b, strict=False)
    za = Y0.data[:, 2]
    zb = (Y0.data @ R0.data.T + t0.data)[:, 2]
    front = ok & (za > geo.MIN_DEPTH) & (zb > geo.MIN_DEPTH)
    dropped = int(np.count_nonzero(~front))
    if not np.any(front):
        raise DegenerateConfigurationError("no match triangulates in front of both cameras")
    if dropped:
        log.debug("bundle_adjust: dropping %d matches behind a camera", dropped)
    keep_idx = np.flatnonzero(front)
    sub = sub.subset(keep_idx)
    Y0 = Y0[keep_idx]
    obs = Observations.two_view(sub, intr_a, intr_b)
    gn = gauss_newton([dc.tensor(np.eye(3)), R0], [dc.tensor(np.zeros(3)), t0], Y0, obs, T, beta0)
    R, t = gn.Rs[1], gn.ts[1]
    scale = dc.norm(t)
    t_unit = t / scale
    Y = gn.Y / scale
    pose = geo.RelativePose(geo.Pose(np.array(R.data), np.array(t_unit.data)))
    # before/after statistics over the matches that survived to the end
    ids = gn.point_ids
    final = sub.subset(ids)
    with dc.no_grad():
        e0 = float(np.sum(_data(ba_residuals(None, Y0.data[ids], final, intr_a, intr_b, R=R0.data, t=t0.data)) ** 2))
    e1 = gn.residual_norms[-1] ** 2
    rmse0 = reprojection_rmse(R0, t0, Y0.data[ids], final, intr_a, intr_b)
    rmse1 = reprojection_rmse(R, t, gn.Y, final, intr_a, intr_b)
    kept = live[keep_idx][ids]
    return BAResult(pose, np.array(Y.data), R, t_unit, Y, kept, dropped + len(keep_idx) - len(ids),
                    gn, e0, e1, rmse0, rmse1)


def reprojection_rmse(R, t, Y, matches: WeightedMatches, intr_a, intr_b) -> float:
    """Unweighted pixel RMSE of the two-view reprojections."""
    unit = WeightedMatches(_data(matches.x), _data(matches.x_prime))
    with dc.no_grad():
        r = _data(ba_residuals(None, Y, unit, intr_a, intr_b, R=R, t=t))
    return float(np.sqrt(np.mean(r ** 2)))
