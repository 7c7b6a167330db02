"""Pinhole cameras, SE(3) poses, triangulation and epipolar algebra.

Pose convention: ``(R, t)`` maps points from the reference frame into the
camera frame, ``u = R @ y + t``.  A relative pose a->b maps camera-a
coordinates into camera b.

Functions that accept :class:`~mvmatch.diffcore.Tensor` inputs stay on the
tape; plain arrays in give plain arrays out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .errors import (
    BehindCameraError,
    DegenerateTriangulationError,
    NoValidSolutionError,
)

MIN_DEPTH = 1e-6
PARALLEL_TOL = 1e-5
EPIPOLAR_THRESHOLD = 5e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def normalize(self, pts) -> np.ndarray:
        """Pixel coordinates to K^-1 normalized image coordinates."""
        pts = np.asarray(pts, dtype=float)
        return np.stack([(pts[..., 0] - self.cx) / self.fx, (pts[..., 1] - self.cy) / self.fy], -1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# -- Lie group helpers -------------------------------------------------------

def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _so3_coeffs(theta2: float):
    if theta2 < 1e-8:
        a = 1.0 - theta2 / 6.0 + theta2 ** 2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 ** 2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 ** 2 / 5040.0
    else:
        th = np.sqrt(theta2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / theta2
        c = (1.0 - a) / theta2
    return a, b, c


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    a, b, _ = _so3_coeffs(float(omega @ omega))
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    v = vee(R - R.T) / 2.0  # sin(theta) * axis
    s = np.linalg.norm(v)
    c = (np.trace(R) - 1.0) / 2.0
    theta = np.arctan2(s, c)
    if s < 1e-4 and c < 0:
        # near pi: axis from the symmetric part
        sym = (R + R.T) / 2.0 - c * np.eye(3)
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / np.sqrt(sym[k, k])
        if axis @ v < 0:
            axis = -axis
        return theta * axis
    if s < 1e-12:
        return v
    return theta / s * v


def _left_jacobian(omega) -> np.ndarray:
    _, b, c = _so3_coeffs(float(omega @ omega))
    k = hat(omega)
    return np.eye(3) + b * k + c * (k @ k)


def se3_exp(p) -> tuple:
    """6-vector (translation, rotation) to ``(R, t)``."""
    p = np.asarray(p, dtype=float)
    rho, omega = p[:3], p[3:]
    return so3_exp(omega), _left_jacobian(omega) @ rho


def se3_log(R, t) -> np.ndarray:
    omega = so3_log(R)
    rho = np.linalg.solve(_left_jacobian(omega), np.asarray(t, dtype=float))
    return np.concatenate([rho, omega])


def so3_exp_t(omega: dc.Tensor) -> dc.Tensor:
    """Rodrigues formula on the tape; series branch near zero angle."""
    a, b, _ = _so3_coeffs_t(omega)
    k = dc.skew(omega)
    return dc.add(dc.add(np.eye(3), a * k), b * dc.matmul(k, k))


def _so3_coeffs_t(omega: dc.Tensor):
    theta2 = dc.tsum(omega * omega)
    if theta2.item() < 1e-8:
        t4 = theta2 * theta2
        a = 1.0 - theta2 * (1.0 / 6.0) + t4 * (1.0 / 120.0)
        b = 0.5 - theta2 * (1.0 / 24.0) + t4 * (1.0 / 720.0)
        c = 1.0 / 6.0 - theta2 * (1.0 / 120.0) + t4 * (1.0 / 5040.0)
        return a, b, c
    th = dc.sqrt(theta2)
    a = dc.sin(th) / th
    b = (1.0 - dc.cos(th)) / theta2
    c = (1.0 - a) / theta2
    return a, b, c


def se3_exp_t(p: dc.Tensor):
    rho, omega = p[0:3], p[3:6]
    a, b, c = _so3_coeffs_t(omega)
    k = dc.skew(omega)
    k2 = dc.matmul(k, k)
    R = dc.add(dc.add(np.eye(3), a * k), b * k2)
    V = dc.add(dc.add(np.eye(3), b * k), c * k2)
    return R, dc.matmul(V, rho)


@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @property
    def p(self) -> np.ndarray:
        """se(3) coordinates, translation part first."""
        return se3_log(self.R, self.t)

    @classmethod
    def from_vector(cls, p) -> "Pose":
        return cls(*se3_exp(p))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self`` after ``other``."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts) @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


def relative_pose(pose_a: Pose, pose_b: Pose) -> Pose:
    """Transform from camera a to camera b given world-to-camera poses."""
    return pose_b.compose(pose_a.inverse())


@dataclass
class RelativePose:
    pose: Pose
    scale_known: bool = False

    def __post_init__(self):
        if not self.scale_known:
            n = np.linalg.norm(self.pose.t)
            if n > 0:
                self.pose = Pose(self.pose.R, self.pose.t / n)

    @property
    def R(self) -> np.ndarray:
        return self.pose.R

    @property
    def t(self) -> np.ndarray:
        return self.pose.t


# -- projection and triangulation ---------------------------------------------

def _is_tensor(*xs) -> bool:
    return any(isinstance(x, dc.Tensor) for x in xs)


def _out(x: dc.Tensor, keep: bool):
    return x if keep else np.array(x.data)


def project(intrinsics: CameraIntrinsics, point_cam):
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    keep = _is_tensor(point_cam)
    u = dc.as_tensor(point_cam)
    z = u[..., 2]
    if np.any(z.data <= MIN_DEPTH):
        raise BehindCameraError(f"point depth {float(np.min(z.data)):.3e} <= {MIN_DEPTH}")
    px = u[..., 0] / z * intrinsics.fx + intrinsics.cx
    py = u[..., 1] / z * intrinsics.fy + intrinsics.cy
    return _out(dc.stack([px, py], -1), keep)


def projection_jacobian(intrinsics: CameraIntrinsics, point_cam):
    """d(project)/d(point) as (..., 2, 3)."""
    keep = _is_tensor(point_cam)
    u = dc.as_tensor(point_cam)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    inv = 1.0 / uz
    zero = ux * 0.0
    row0 = dc.stack([inv * intrinsics.fx, zero, -(ux * inv * inv) * intrinsics.fx], -1)
    row1 = dc.stack([zero, inv * intrinsics.fy, -(uy * inv * inv) * intrinsics.fy], -1)
    return _out(dc.stack([row0, row1], -2), keep)


def backproject(intrinsics: CameraIntrinsics, pixels, depth) -> np.ndarray:
    n = intrinsics.normalize(pixels)
    depth = np.asarray(depth, dtype=float)
    return np.concatenate([n * depth[..., None], depth[..., None]], -1)


def _rays(intrinsics: CameraIntrinsics, x) -> dc.Tensor:
    x = dc.as_tensor(x)
    rx = (x[..., 0] - intrinsics.cx) * (1.0 / intrinsics.fx)
    ry = (x[..., 1] - intrinsics.cy) * (1.0 / intrinsics.fy)
    return dc.stack([rx, ry, rx * 0.0 + 1.0], -1)


def triangulate_batch(R, t, x_a, x_b, intr_a: CameraIntrinsics, intr_b: CameraIntrinsics,
                      strict: bool = True):
    """Midpoint triangulation of M matches, points in the camera-a frame.

    Returns ``(Y, ok)`` where ``ok`` marks non-parallel rays.  With
    ``strict`` any parallel pair raises.
    """
    keep = _is_tensor(R, t, x_a, x_b)
    R, t = dc.as_tensor(R), dc.as_tensor(t)
    da = _rays(intr_a, x_a)
    db = dc.matmul(_rays(intr_b, x_b), R)  # rows of R^T d
    c = -dc.matmul(t, R)  # second centre, -R^T t
    aa = dc.tsum(da * da, -1)
    bb = dc.tsum(db * db, -1)
    ab = dc.tsum(da * db, -1)
    ac = dc.tsum(da * c, -1)
    bc = dc.tsum(db * c, -1)
    det = ab * ab - aa * bb
    sin2 = -det.data / (aa.data * bb.data)
    ok = sin2 > PARALLEL_TOL ** 2
    if strict and not np.all(ok):
        raise DegenerateTriangulationError(
            f"near-parallel rays for matches {np.flatnonzero(~ok).tolist()}")
    if not np.all(ok):
        det = det + dc.tensor(np.where(ok, 0.0, -1.0))
    s = (ab * bc - ac * bb) / det
    u = (aa * bc - ab * ac) / det
    y = (da * s[..., None] + db * u[..., None] + c) * 0.5
    return _out(y, keep), ok


def triangulate(pose_ab: RelativePose, x_a, x_b, intr_a: CameraIntrinsics,
                intr_b: CameraIntrinsics):
    """Single-match midpoint triangulation."""
    pose = pose_ab.pose if isinstance(pose_ab, RelativePose) else pose_ab
    y, _ = triangulate_batch(pose.R, pose.t, np.asarray(x_a)[None], np.asarray(x_b)[None],
                             intr_a, intr_b)
    return y[0]


def triangulate_multiview(poses: Sequence[Pose], pixels, intrinsics: Sequence[CameraIntrinsics]):
    """Least-squares point closest to all observation rays (world frame)."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for pose, x, intr in zip(poses, pixels, intrinsics):
        d = pose.R.T @ (intr.K_inv @ np.array([x[0], x[1], 1.0]))
        d /= np.linalg.norm(d)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ pose.center
    if np.linalg.cond(A) > 1e10:
        raise DegenerateTriangulationError("rays are (nearly) parallel")
    return np.linalg.solve(A, b)


# -- epipolar algebra ---------------------------------------------------------

def essential_from(R, t) -> np.ndarray:
    return hat(np.asarray(t, dtype=float)) @ np.asarray(R, dtype=float)


def fundamental_from(R, t, intr_a: CameraIntrinsics, intr_b: CameraIntrinsics) -> np.ndarray:
    return intr_b.K_inv.T @ essential_from(R, t) @ intr_a.K_inv


def essential_from_fundamental(F, intr_a: CameraIntrinsics, intr_b: CameraIntrinsics) -> np.ndarray:
    """``K_b^T F K_a`` projected to singular values (s, s, 0), s the mean of the top two."""
    E = intr_b.K.T @ np.asarray(F, dtype=float) @ intr_a.K
    U, S, Vt = np.linalg.svd(E)
    s = (S[0] + S[1]) / 2.0
    return U @ np.diag([s, s, 0.0]) @ Vt


def decompose_essential(E) -> list:
    """The four (R, t) candidates, ordered (R1,t), (R1,-t), (R2,t), (R2,-t)."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [RelativePose(Pose(R, s * t)) for R in (R1, R2) for s in (1.0, -1.0)]


def cheirality_counts(candidates, x_a, x_b, intr_a, intr_b) -> np.ndarray:
    counts = []
    for cand in candidates:
        y, ok = triangulate_batch(cand.R, cand.t, x_a, x_b, intr_a, intr_b, strict=False)
        za = y[:, 2]
        zb = (y @ cand.R.T + cand.t)[:, 2]
        counts.append(int(np.sum(ok & (za > 0) & (zb > 0))))
    return np.array(counts)


def select_cheirality(candidates, x_a, x_b, intr_a: CameraIntrinsics, intr_b: CameraIntrinsics,
                      mode: str = "cheirality", gt: RelativePose | None = None) -> int:
    """Index of the chosen candidate.

    ``cheirality`` keeps the candidate with most points in front of both
    cameras (lowest index on ties); ``closest_to_gt`` the one with the
    smallest summed rotation and translation-direction error.
    """
    if mode == "closest_to_gt":
        if gt is None:
            raise ValueError("closest_to_gt needs a ground-truth pose")
        errs = [sum(pose_error(c, gt)) for c in candidates]
        return int(np.argmin(errs))
    if mode != "cheirality":
        raise ValueError(f"unknown selection mode {mode!r}")
    x_a, x_b = np.atleast_2d(x_a), np.atleast_2d(x_b)
    if len(x_a) < 1:
        raise ValueError("cheirality selection needs at least one match")
    counts = cheirality_counts(candidates, x_a, x_b, intr_a, intr_b)
    if counts.max() == 0:
        raise NoValidSolutionError("no candidate places any point in front of both cameras")
    return int(np.argmax(counts))


class PoseError(NamedTuple):
    rotation_deg: float
    translation_deg: float

    @property
    def translation_defined(self) -> bool:
        return not np.isnan(self.translation_deg)

    @property
    def max(self) -> float:
        return max(self.rotation_deg, self.translation_deg)


def rotation_angle_deg(R_a, R_b) -> float:
    M = np.asarray(R_a).T @ np.asarray(R_b)
    s = np.linalg.norm(vee(M - M.T)) / 2.0
    c = (np.trace(M) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, min(max(c, -1.0), 1.0))))


def vector_angle_deg(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def pose_error(estimate, gt) -> PoseError:
    """Rotation geodesic angle and translation direction angle in degrees."""
    est = estimate.pose if isinstance(estimate, RelativePose) else estimate
    ref = gt.pose if isinstance(gt, RelativePose) else gt
    rot = rotation_angle_deg(est.R, ref.R)
    if np.linalg.norm(est.t) == 0 or np.linalg.norm(ref.t) == 0:
        return PoseError(rot, float("nan"))
    return PoseError(rot, vector_angle_deg(est.t, ref.t))


def symmetric_epipolar_distance(F, x_a, x_b):
    """Symmetric squared epipolar distance for x_b^T F x_a = 0.

    Works on a single pair or on (M, 2) batches.
    """
    F = np.asarray(F, dtype=float)
    xa = np.atleast_2d(x_a)
    xb = np.atleast_2d(x_b)
    ha = np.concatenate([xa, np.ones((len(xa), 1))], 1)
    hb = np.concatenate([xb, np.ones((len(xb), 1))], 1)
    Fa = ha @ F.T
    Ftb = hb @ F
    num = np.sum(hb * Fa, 1) ** 2
    d = num * (1.0 / (Fa[:, 0] ** 2 + Fa[:, 1] ** 2) + 1.0 / (Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2))
    return float(d[0]) if np.ndim(x_a) == 1 else d
