"""Shared scene builders and numerical oracles for the tests."""

import numpy as np

from mvmatch import diffcore as dc
from mvmatch import geometry as geo

INTR = geo.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return geo.so3_exp(axis * rng.uniform(0, max_angle))


def two_view(rng, m=20, noise=0.0, intr=INTR):
    """Points spread over image a at depth 2..8 that also land inside image b."""
    R = random_rotation(rng, np.radians(15))
    t = rng.normal(size=3)
    t *= rng.uniform(0.3, 1.0) / np.linalg.norm(t)
    pts = np.zeros((0, 3))
    while len(pts) < m:
        px = rng.uniform([0, 0], [intr.width, intr.height], size=(4 * m, 2))
        cand = geo.backproject(intr, px, rng.uniform(2, 8, size=4 * m))
        ub = cand @ R.T + t
        front = ub[:, 2] > 0.5
        pb = geo.project(intr, np.where(front[:, None], ub, 1.0))
        inside = front & (pb[:, 0] >= 0) & (pb[:, 0] < intr.width) & (pb[:, 1] >= 0) & (pb[:, 1] < intr.height)
        pts = np.concatenate([pts, cand[inside]])
    pts = pts[:m]
    xa = geo.project(intr, pts) + rng.normal(scale=noise, size=(m, 2)) * (noise > 0)
    xb = geo.project(intr, pts @ R.T + t) + rng.normal(scale=noise, size=(m, 2)) * (noise > 0)
    return R, t, pts, xa, xb


def perturbed(rng, R, t, rot_deg=3.0, trans_deg=10.0):
    """Ground truth rotated by ``rot_deg`` and translation direction tilted by ``trans_deg``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    tn = t / np.linalg.norm(t)
    tilt = np.cross(tn, rng.normal(size=3))
    tilt /= np.linalg.norm(tilt)
    return geo.RelativePose(geo.Pose(geo.so3_exp(axis * np.radians(rot_deg)) @ R,
                                     geo.so3_exp(tilt * np.radians(trans_deg)) @ tn))


def fd_error(fn, x, step=1e-6):
    """Tape gradient vs central differences, relative to the largest numeric entry."""
    x = np.array(x, dtype=float)
    xt = dc.tensor(x, requires_grad=True)
    (analytic,) = dc.grad(fn(xt), [xt])
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += step
        minus[k] -= step
        with dc.no_grad():
            numeric.reshape(-1)[k] = (fn(dc.tensor(plus.reshape(x.shape))).item()
                                      - fn(dc.tensor(minus.reshape(x.shape))).item()) / (2 * step)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-300))


def same_up_to_sign(a, b):
    return min(np.max(np.abs(a - b)), np.max(np.abs(a + b)))
