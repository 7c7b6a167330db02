"""Labels, losses, Adam and the two-stage toy training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from . import matcher as mt
from . import posesolver as ps
from .errors import (
    DegenerateConfigurationError,
    DegenerateSpectrumError,
    DivergenceError,
    LabelGenerationError,
    MvMatchError,
    NonFiniteError,
)

log = logging.getLogger(__name__)

LABEL_THRESHOLDS_INDOOR = (5.0, 15.0)
LABEL_THRESHOLDS_OUTDOOR = (5.0, 10.0)
LOG_FLOOR = np.log(1e-12)
ARCCOS_CLAMP = 1.0 - 1e-7
GRAD_CLIP = 10.0


# -- labels ------------------------------------------------------------------

@dataclass
class MatchLabels:
    matches: np.ndarray  # (T, 2) index pairs
    unmatched_a: np.ndarray
    unmatched_b: np.ndarray

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=int).reshape(-1, 2)
        self.unmatched_a = np.asarray(self.unmatched_a, dtype=int).reshape(-1)
        self.unmatched_b = np.asarray(self.unmatched_b, dtype=int).reshape(-1)
        ia, ib = self.matches[:, 0], self.matches[:, 1]
        if len(set(ia)) != len(ia) or len(set(ib)) != len(ib):
            raise LabelGenerationError("ground-truth matches are not one-to-one")
        if set(ia) & set(self.unmatched_a) or set(ib) & set(self.unmatched_b):
            raise LabelGenerationError("a keypoint is labelled both matched and unmatched")

    def to_dict(self) -> dict:
        return {"matches": self.matches.tolist(), "unmatched_a": self.unmatched_a.tolist(),
                "unmatched_b": self.unmatched_b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchLabels":
        return cls(np.array(d["matches"], dtype=int), np.array(d["unmatched_a"], dtype=int),
                   np.array(d["unmatched_b"], dtype=int))

    def as_sets(self) -> tuple:
        return ({(int(i), int(j)) for i, j in self.matches}, set(self.unmatched_a.tolist()),
                set(self.unmatched_b.tolist()))


def _world_points(frame) -> np.ndarray:
    d = None if frame.depths is None else np.asarray(frame.depths, dtype=float)
    if d is None or d.shape != (len(frame.keypoints),) or not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise LabelGenerationError("every keypoint needs a finite positive ground-truth depth")
    cam = geo.backproject(frame.intrinsics, frame.keypoints.coords, d)
    return (cam - frame.pose.t) @ frame.pose.R  # R^T (x - t)


def transfer_distances(frame_a, frame_b) -> np.ndarray:
    """``D[i, j]`` = pixel distance from keypoint i of a, moved into b by GT depth and pose, to keypoint j of b.

    Points that land behind camera b get an infinite distance.
    """
    u = _world_points(frame_a) @ frame_b.pose.R.T + frame_b.pose.t
    front = u[:, 2] > geo.MIN_DEPTH
    proj = geo.project(frame_b.intrinsics, np.where(front[:, None], u, [0.0, 0.0, 1.0]))
    dist = np.linalg.norm(proj[:, None, :] - frame_b.keypoints.coords[None, :, :], axis=2)
    dist[~front] = np.inf
    return dist


def generate_labels(frame_a, frame_b, thresholds: tuple = LABEL_THRESHOLDS_INDOOR) -> MatchLabels:
    """Ground-truth correspondences from reprojection in both directions.

    A pair is a match when each keypoint is the other's nearest transfer and
    both distances are below ``thresholds[0]``; a keypoint is unmatched when
    its nearest transfer exceeds ``thresholds[1]``.  Keypoints flagged as
    outliers are left out of every label set.
    """
    match_px, unmatched_px = thresholds
    d_ab = transfer_distances(frame_a, frame_b)  # a -> b
    d_ba = transfer_distances(frame_b, frame_a)  # b -> a
    out_a = getattr(frame_a, "outliers", None)
    out_b = getattr(frame_b, "outliers", None)
    out_a = np.zeros(len(d_ab), bool) if out_a is None else np.asarray(out_a, bool)
    out_b = np.zeros(d_ab.shape[1], bool) if out_b is None else np.asarray(out_b, bool)
    nn_ab = np.argmin(d_ab, axis=1)
    nn_ba = np.argmin(d_ba, axis=1)
    matches = []
    for i, j in enumerate(nn_ab):
        if (nn_ba[j] == i and d_ab[i, j] < match_px and d_ba[j, i] < match_px
                and not out_a[i] and not out_b[j]):
            matches.append((i, int(j)))
    un_a = np.flatnonzero((d_ab.min(axis=1) > unmatched_px) & ~out_a)
    un_b = np.flatnonzero((d_ba.min(axis=1) > unmatched_px) & ~out_b)
    return MatchLabels(np.array(matches, dtype=int).reshape(-1, 2), un_a, un_b)


def geometric_correct(frame_a, frame_b, idx_a, idx_b, threshold: float = LABEL_THRESHOLDS_INDOOR[0]) -> np.ndarray:
    """Whether each proposed match reprojects within ``threshold`` px in both directions."""
    idx_a, idx_b = np.asarray(idx_a, int), np.asarray(idx_b, int)
    if idx_a.size == 0:
        return np.zeros(0, dtype=bool)
    d_ab = transfer_distances(frame_a, frame_b)[idx_a, idx_b]
    d_ba = transfer_distances(frame_b, frame_a)[idx_b, idx_a]
    return (d_ab < threshold) & (d_ba < threshold)


# -- losses ------------------------------------------------------------------

@dataclass
class LossStats:
    saturated: int = 0
    pose_skipped: int = 0
    pose_terms: int = 0


def match_loss(P, labels: MatchLabels, is_log: bool = False, stats: LossStats | None = None) -> dc.Tensor:
    """Negative log-likelihood of labelled matches and dustbin events."""
    P = dc.as_tensor(P)
    logp = P if is_log else dc.log(dc.clip(P, 1e-12, np.inf))
    if is_log:
        logp = dc.clip(logp, LOG_FLOOR, np.inf)
    rows = np.concatenate([labels.matches[:, 0], labels.unmatched_a, np.full(len(labels.unmatched_b), P.shape[-2] - 1)])
    cols = np.concatenate([labels.matches[:, 1], np.full(len(labels.unmatched_a), P.shape[-1] - 1), labels.unmatched_b])
    rows, cols = rows.astype(int), cols.astype(int)
    if stats is not None and rows.size:
        stats.saturated += int(np.count_nonzero(logp.data[rows, cols] <= LOG_FLOOR))
    if rows.size == 0:
        return dc.tsum(logp * 0.0)
    return -dc.tsum(logp[rows, cols])


def _clamped_arccos(x) -> dc.Tensor:
    """arccos with its argument clamped for the backward pass only.

    The detached offset restores the exact forward value, so a perfect
    estimate still scores 0 while the gradient stays finite at +-1.
    """
    c = dc.clip(x, -ARCCOS_CLAMP, ARCCOS_CLAMP)
    v = float(np.clip(x.data, -1.0, 1.0))
    return dc.arccos(c) + (np.arccos(v) - np.arccos(float(c.data)))


def pose_loss(estimate, gt: geo.RelativePose, lambda_rot: float) -> dc.Tensor:
    """Translation angle plus ``lambda_rot`` times rotation geodesic, in radians."""
    if isinstance(estimate, ps.PoseEstimate):
        R, t = dc.as_tensor(estimate.R), dc.as_tensor(estimate.t)
    else:
        pose = estimate.pose if isinstance(estimate, geo.RelativePose) else estimate
        R, t = dc.tensor(pose.R), dc.tensor(pose.t)
    gt_pose = gt.pose if isinstance(gt, geo.RelativePose) else gt
    tn = np.linalg.norm(t.data)
    if tn == 0 or np.linalg.norm(gt_pose.t) == 0:
        raise DegenerateConfigurationError("pose loss needs nonzero translations")
    cos_t = dc.tsum(t * gt_pose.t) / (dc.norm(t) * np.linalg.norm(gt_pose.t))
    cos_r = (dc.tsum(R * gt_pose.R) - 1.0) * 0.5
    return _clamped_arccos(cos_t) + lambda_rot * _clamped_arccos(cos_r)


@dataclass(frozen=True)
class LossSchedule:
    lambda_pose_max: float = 242.0
    lambda_match_min: float = 0.01
    ramp_iters: int = 40000
    lambda_rot: float = 3.0

    def __post_init__(self):
        if self.ramp_iters < 1:
            raise ValueError("ramp_iters must be >= 1")
        if min(self.lambda_pose_max, self.lambda_match_min, self.lambda_rot) < 0:
            raise ValueError("loss weights must be nonnegative")

    def weights(self, iteration: int, stage: int = 2) -> tuple:
        """(lambda_match, lambda_pose) at a stage-local iteration."""
        if stage == 1:
            return 1.0, 0.0
        a = min(max(iteration, 0) / self.ramp_iters, 1.0)
        return 1.0 + a * (self.lambda_match_min - 1.0), a * self.lambda_pose_max


LOSS_PROFILES = {
    "scannet": LossSchedule(242.0, 0.01, 40000, 3.0),
    "matterport": LossSchedule(585.0, 0.01, 40000, 1.2),
    "megadepth": LossSchedule(345.0, 0.01, 40000, 2.0),
}


def pair_pose_estimate(frames, out: mt.PairOutput, conf: dc.Tensor, idx_a, idx_b,
                       gt: geo.RelativePose, mode: str = "closest_to_gt") -> ps.PoseEstimate:
    """Weighted eight-point pose for one pair of a matcher pass (on the tape)."""
    fa, fb = frames[out.a], frames[out.b]
    m = ps.WeightedMatches(fa.keypoints.coords[idx_a], fb.keypoints.coords[idx_b], conf)
    F = ps.weighted_eight_point(m)
    if mode == "closest_to_gt":
        return ps.recover_pose_t(F, m, fa.intrinsics, fb.intrinsics, mode, gt)
    return ps.recover_pose_t(F, m, fa.intrinsics, fb.intrinsics, mode)


def total_loss(sample, outputs: Sequence[mt.PairOutput], params, schedule: LossSchedule,
               iteration: int, stage: int, config: mt.MatcherConfig,
               stats: LossStats | None = None) -> tuple:
    """Sum over pairs of ``lambda_match L_match + lambda_pose L_pose``.

    Returns (loss, summed match loss, summed pose loss) with the last two as
    floats.  A pair whose eight-point solve is degenerate contributes no
    pose term (counted in ``stats.pose_skipped``).
    """
    lam_m, lam_p = schedule.weights(iteration, stage)
    stats = stats if stats is not None else LossStats()
    terms, m_sum, p_sum = [], 0.0, 0.0
    for out in outputs:
        lm = match_loss(out.log_p, sample.labels[(out.a, out.b)], is_log=True, stats=stats)
        m_sum += lm.item()
        terms.append(lm * lam_m)
        if stage == 1:
            continue
        lp = _pair_pose_loss(sample, out, params, schedule, config, stats)
        if lp is not None:
            p_sum += lp.item()
            terms.append(lp * lam_p)
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss, m_sum, p_sum


def _pair_pose_loss(sample, out, params, schedule, config, stats):
    found = mt.extract_matches(out.log_p.data)
    if len(found) < 8:
        stats.pose_skipped += 1
        return None
    ia = np.array([f[0] for f in found])
    ib = np.array([f[1] for f in found])
    conf = mt.predict_confidence(out.f_a[ia], out.f_b[ib], dc.exp(out.log_p[ia, ib]), params, config)
    gt = sample.relative_gt(out.a, out.b)
    try:
        est = pair_pose_estimate(sample.frames, out, conf, ia, ib, gt)
    except (DegenerateSpectrumError, DegenerateConfigurationError, NonFiniteError):
        stats.pose_skipped += 1
        return None
    stats.pose_terms += 1
    return pose_loss(est, gt, schedule.lambda_rot)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float = 1e-4,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              decay: float = 1.0, decay_after: int = 0) -> tuple:
    """One Adam update; returns (new weights, state).  Inputs are not modified.

    With ``decay < 1`` the step size is multiplied by ``decay`` for every
    step beyond ``decay_after``.
    """
    b1, b2 = betas
    state.step += 1
    k = state.step
    rate = lr * decay ** max(0, k - decay_after)
    out = {}
    for name, w in weights.items():
        g = grads[name]
        if np.shape(g) != np.shape(w):
            raise ValueError(f"gradient shape {np.shape(g)} != weight shape {np.shape(w)} for {name}")
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        out[name] = w - rate * mhat / (np.sqrt(vhat) + eps)
    return out, state


def clip_by_global_norm(grads: dict, max_norm: float = GRAD_CLIP) -> tuple:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainConfig:
    matcher: mt.MatcherConfig = field(default_factory=mt.MatcherConfig)
    schedule: LossSchedule = field(default_factory=lambda: LossSchedule(242.0, 0.01, 1000, 3.0))
    mode: str = "joint"
    stage1_iters: int = 1000
    stage2_iters: int = 1000
    lr: float = 1e-3
    decay: float = 1.0
    decay_after: int = 0
    val_every: int = 200
    val_tuples: int = 20
    auc_threshold: float = 10.0
    lr_stage2: float | None = None  # None: same as lr

    def stage_lr(self, stage: int) -> float:
        return self.lr if stage == 1 or self.lr_stage2 is None else self.lr_stage2


@dataclass
class TrainResult:
    weights: mt.MatcherWeights
    records: list
    stats: LossStats
    seconds: float


def _append(path, record):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def evaluate_losses(dataset, weights: mt.MatcherWeights, config: TrainConfig) -> dict:
    """Validation match loss, pose loss and two-view AUC (weighted eight-point, cheirality)."""
    from .multiview import auc

    p = weights.bind()
    m_tot = p_tot = 0.0
    n_pairs = n_pose = 0
    errors = []
    stats = LossStats()
    with dc.no_grad():
        for sample in dataset.tuples[:config.val_tuples]:
            outputs = mt.forward_tuple([f.keypoints for f in sample.frames], p, config.mode, weights.config)
            for out in outputs:
                m_tot += match_loss(out.log_p, sample.labels[(out.a, out.b)], True, stats).item()
                n_pairs += 1
                lp = _pair_pose_loss(sample, out, p, config.schedule, weights.config, stats)
                if lp is not None:
                    p_tot += lp.item()
                    n_pose += 1
                errors.append(_two_view_error(sample, out, p, weights.config))
    return {
        "match_loss": m_tot / max(n_pairs, 1),
        "pose_loss": p_tot / max(n_pose, 1),
        "pose_pairs": n_pose,
        "val_auc": auc(errors, [config.auc_threshold])[0],
    }


def _two_view_error(sample, out, p, cfg) -> float:
    """max(rotation, translation) error of weighted eight-point + BA on the predicted matches."""
    from .multiview import FAIL_DEG, two_view_pose

    found = mt.extract_matches(out.log_p.data)
    if len(found) < 8:
        return FAIL_DEG
    ia = np.array([f[0] for f in found])
    ib = np.array([f[1] for f in found])
    conf = mt.predict_confidence(out.f_a[ia], out.f_b[ib], np.exp(out.log_p.data[ia, ib]), p, cfg)
    fa, fb = sample.frames[out.a], sample.frames[out.b]
    try:
        pose = two_view_pose(fa.keypoints.coords[ia], fb.keypoints.coords[ib], conf.data,
                             fa.intrinsics, fb.intrinsics, "8pt+ba")
    except MvMatchError:
        return FAIL_DEG
    err = geo.pose_error(pose, sample.relative_gt(out.a, out.b))
    return err.max if err.translation_defined else FAIL_DEG


def train_toy(dataset, config: TrainConfig, seed: int, val=None, init: mt.MatcherWeights | None = None,
              stages: Sequence[int] = (1, 2), log_path=None) -> TrainResult:
    """Two-stage training: match loss only, then the ramped match + pose loss.

    One tuple per iteration in a seeded shuffled order.  The metrics log gets
    one JSON record per validation point.  Any non-finite loss or gradient
    raises DivergenceError with the global iteration index.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    weights = init.copy() if init is not None else mt.MatcherWeights.init(config.matcher, int(rng.integers(2 ** 31)))
    names = weights.names()
    params = dict(weights.params)
    stats = LossStats()
    records = []
    if log_path is not None:
        Path(log_path).write_text("")
    order = []
    it_global = 0

    def validate(stage, local_it):
        if val is None:
            return
        metrics = evaluate_losses(val, mt.MatcherWeights(config.matcher, params), config)
        rec = {"iteration": it_global, "stage": stage, "match_loss": metrics["match_loss"],
               "pose_loss": metrics["pose_loss"], "val_auc": metrics["val_auc"]}
        records.append(rec)
        _append(log_path, rec)
        log.info("stage %d iter %d: %s", stage, local_it, rec)

    for stage in stages:
        iters = config.stage1_iters if stage == 1 else config.stage2_iters
        state = AdamState()  # each stage starts with fresh moments
        validate(stage, 0)
        for it in range(iters):
            if not order:
                order = list(rng.permutation(len(dataset.tuples)))
            sample = dataset.tuples[order.pop()]
            bound = {n: dc.tensor(params[n], True) for n in names}
            try:
                outputs = mt.forward_tuple([f.keypoints for f in sample.frames], bound, config.mode, config.matcher)
                loss, _, _ = total_loss(sample, outputs, bound, config.schedule, it, stage, config.matcher, stats)
                grads = dict(zip(names, dc.grad(loss, [bound[n] for n in names])))
            except NonFiniteError as exc:
                raise DivergenceError(it_global, "loss") from exc
            grads, _ = clip_by_global_norm(grads)
            params, state = adam_step(params, grads, state, config.stage_lr(stage), decay=config.decay,
                                      decay_after=config.decay_after)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise DivergenceError(it_global, "weights")
            it_global += 1
            if (it + 1) % config.val_every == 0 or it + 1 == iters:
                validate(stage, it + 1)
    return TrainResult(mt.MatcherWeights(config.matcher, params), records, stats, time.perf_counter() - t0)


def confidence_margin(dataset, weights: mt.MatcherWeights, mode: str = "joint",
                      threshold: float = LABEL_THRESHOLDS_INDOOR[0]) -> tuple:
    """(mean confidence of correct matches - mean of wrong ones, n correct, n wrong).

    A predicted match is correct when it reprojects within ``threshold`` px
    in both directions under the ground-truth geometry.
    """
    good, bad = [], []
    for sample in dataset.tuples:
        ms = mt.match_tuple([f.keypoints for f in sample.frames], weights, mode)
        for (a, b), pm in ms.pairs.items():
            ok = geometric_correct(sample.frames[a], sample.frames[b], pm.idx_a, pm.idx_b, threshold)
            good.extend(pm.weights[ok])
            bad.extend(pm.weights[~ok])
    if not good or not bad:
        return float("nan"), len(good), len(bad)
    return float(np.mean(good) - np.mean(bad)), len(good), len(bad)
