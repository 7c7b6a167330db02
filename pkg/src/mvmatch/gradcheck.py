"""Finite-difference checks of every differentiable stage of the pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from . import matcher as mt
from . import posesolver as ps
from . import synthdata as sd
from . import training as tr

TOLERANCES = {"sinkhorn": 1e-4, "eight_point_weights": 1e-3, "eight_point_coords": 1e-3,
              "ba_unroll": 1e-2, "stage2_loss": 1e-2}
MICRO_CONFIG = mt.MatcherConfig(dim=8, heads=2, schedule=mt.SCHEDULE_TOY, sinkhorn_iters=30)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _two_view_scene(rng, m: int, noise: float = 0.5):
    intr = geo.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    axis = rng.normal(size=3)
    R = geo.so3_exp(axis / np.linalg.norm(axis) * np.radians(8))
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    px = rng.uniform([40, 40], [600, 440], size=(m, 2))
    pts = geo.backproject(intr, px, rng.uniform(3, 6, size=m))
    xa = geo.project(intr, pts) + rng.normal(scale=noise, size=(m, 2))
    xb = geo.project(intr, pts @ R.T + t) + rng.normal(scale=noise, size=(m, 2))
    return intr, R, t, xa, xb


def check_sinkhorn(rng, step):
    s = rng.normal(size=(4, 5))
    proj = rng.normal(size=(5, 6))
    return dc.gradcheck(lambda x: dc.tsum(mt.sinkhorn_log(x, 0.3, 30) * proj), s, step)


def check_eight_point(rng, step):
    intr, R, t, xa, xb = _two_view_scene(rng, 12)
    w = rng.uniform(0.2, 1.0, size=12)
    G = rng.normal(size=(3, 3))

    def via_w(wt):
        return dc.tsum(ps.weighted_eight_point(ps.WeightedMatches(xa, xb, wt)) * G)

    def via_x(xt):
        return dc.tsum(ps.weighted_eight_point(ps.WeightedMatches(xt, xb, w)) * G)

    return dc.gradcheck(via_w, w, step), dc.gradcheck(via_x, xa, step)


def check_ba_unroll(rng, step, T: int = ps.T_TRAIN):
    intr, R, t, xa, xb = _two_view_scene(rng, 10)
    w = rng.uniform(0.5, 1.0, size=10)
    axis = rng.normal(size=3)
    init = geo.Pose(geo.so3_exp(axis / np.linalg.norm(axis) * np.radians(2)) @ R, t)
    G = rng.normal(size=3)

    def fn(v):
        m = ps.WeightedMatches(dc.reshape(v[:20], (10, 2)), xb, v[20:])
        res = ps.bundle_adjust(init, m, intr, intr, T=T)
        return dc.tsum(res.t * G) + dc.tsum(res.R * 0.1)

    return dc.gradcheck(fn, np.r_[xa.ravel(), w], step)


def micro_instance(seed: int = 0, keypoints: int = 10):
    """Two frames, D = 8, with labels and a weight set.

    With 8 or more keypoints the instance is chosen so the matcher pass
    yields at least 8 matches and the pose term is active.
    """
    cfg = sd.SceneConfig(n_landmarks=60, n_frames=2, keypoints=keypoints, descriptor_dim=MICRO_CONFIG.dim,
                         overlap_range=(0.6, 1.0), saliency_jitter=0.0)
    for k in range(200):
        ds = sd.generate_dataset(cfg, 1, seed=seed + k, noise_px=0.5, desc_noise=0.0)
        sample = ds.tuples[0]
        if len(sample.labels[(0, 1)].matches) < keypoints - 1:
            continue
        w = mt.MatcherWeights.init(MICRO_CONFIG, seed + k)
        last_enc = f"enc{len(MICRO_CONFIG.encoder)}."
        for name in w.names():
            if name.startswith(last_enc) or (name.startswith("gnn") and name.split(".")[1] in ("U2", "c2")):
                w.params[name] = w.params[name] * 0.1
        w.params["W4"] = np.eye(MICRO_CONFIG.dim) * 3.0 + 0.1 * w.params["W4"]
        with dc.no_grad():
            out = mt.forward_tuple([f.keypoints for f in sample.frames], w)
        if keypoints < 8 or len(mt.extract_matches(out[0].log_p.data)) >= 8:
            return sample, w
    raise RuntimeError("no micro instance found")


def stage2_loss_fn(sample, weights: mt.MatcherWeights, names, sel: dict, iteration: int = 10 ** 6,
                   stats: tr.LossStats | None = None):
    """Loss as a function of the selected weight entries (flattened in ``names`` order)."""
    schedule = tr.LossSchedule(lambda_pose_max=1.0, ramp_iters=1)
    base = {n: weights.params[n].copy() for n in weights.names()}
    for n in names:
        base[n].reshape(-1)[sel[n]] = 0.0

    def fn(v):
        p, pos = {}, 0
        for n in weights.names():
            if n in sel:
                k = len(sel[n])
                if base[n].ndim == 0:
                    p[n] = dc.reshape(v[pos:pos + 1], ())
                else:
                    idx = np.unravel_index(sel[n], base[n].shape)
                    p[n] = dc.tensor(base[n]) + dc.scatter(base[n].shape, idx, v[pos:pos + k])
                pos += k
            else:
                p[n] = dc.tensor(base[n])
        outputs = mt.forward_tuple([f.keypoints for f in sample.frames], p, "joint", weights.config)
        loss, _, _ = tr.total_loss(sample, outputs, p, schedule, iteration, 2, weights.config, stats)
        return loss

    x0 = np.concatenate([weights.params[n].reshape(-1)[sel[n]] for n in names])
    return fn, x0


def check_stage2_loss(rng, step, per_tensor: int = 2, keypoints: int = 10):
    sample, weights = micro_instance(0, keypoints)
    names = weights.names()
    sel = {n: np.sort(rng.choice(weights.params[n].size, size=min(per_tensor, weights.params[n].size),
                                 replace=False)) for n in names}
    stats = tr.LossStats()
    fn, x0 = stage2_loss_fn(sample, weights, names, sel, stats=stats)
    with dc.no_grad():
        fn(dc.tensor(x0))
    if keypoints >= 8 and stats.pose_terms == 0:
        raise RuntimeError("micro instance produced no pose term")
    return dc.gradcheck(fn, x0, step)


def run_all(seed: int = 0, step: float = 1e-5) -> list:
    rng = np.random.default_rng(seed)
    out = []

    def timed(f):
        t0 = time.perf_counter()
        val = f()
        return val, time.perf_counter() - t0

    e, s = timed(lambda: check_sinkhorn(rng, step))
    out.append(CheckResult("sinkhorn", e, TOLERANCES["sinkhorn"], s))
    (ew, ex), s = timed(lambda: check_eight_point(rng, step))
    out.append(CheckResult("eight_point_weights", ew, TOLERANCES["eight_point_weights"], s / 2))
    out.append(CheckResult("eight_point_coords", ex, TOLERANCES["eight_point_coords"], s / 2))
    e, s = timed(lambda: check_ba_unroll(rng, step))
    out.append(CheckResult("ba_unroll", e, TOLERANCES["ba_unroll"], s))
    e, s = timed(lambda: check_stage2_loss(rng, step))
    out.append(CheckResult("stage2_loss", e, TOLERANCES["stage2_loss"], s))
    return out
