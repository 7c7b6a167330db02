"""Synthetic scenes and keypoint tuples with exact ground truth.

A scene is a box of landmarks seen by N cameras placed on a jittered arc.
Each camera aims at a point on a small ring around the box centre, which
spreads the views so that every pair shares only part of the scene.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import GenerationError, SamplingError
from .matcher import KeypointSet

DATASET_VERSION = 1
MAX_RETRIES = 100


@dataclass(frozen=True)
class SceneConfig:
    n_landmarks: int = 200
    n_frames: int = 5
    keypoints: int = 24
    descriptor_dim: int = 32
    box_half: tuple = (5.0, 4.0, 1.0)
    arc_radius: float = 5.0
    arc_span_deg: float = 20.0
    aim_radius: float = 1.0
    focal_range: tuple = (450.0, 550.0)
    image_size: tuple = (640, 480)
    overlap_range: tuple = (0.4, 0.8)
    saliency_jitter: float = 0.05
    near: float = 0.1

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a tuple needs at least two frames")
        if self.keypoints < 1 or self.n_landmarks < self.keypoints:
            raise ValueError("need 1 <= keypoints <= n_landmarks")
        lo, hi = self.overlap_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"bad overlap range {self.overlap_range}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Scene:
    landmarks: np.ndarray
    descriptors_gt: np.ndarray
    cameras: list  # (Pose world->camera, CameraIntrinsics)
    saliency: np.ndarray
    seed: int
    config: SceneConfig


@dataclass
class Frame:
    """One view: intrinsics, world-to-camera pose and keypoints with depths."""

    intrinsics: geo.CameraIntrinsics
    pose: geo.Pose
    keypoints: KeypointSet
    depths: np.ndarray
    landmark_ids: np.ndarray
    outliers: np.ndarray

    def __len__(self):
        return len(self.keypoints)


@dataclass
class TupleSample:
    frames: list
    labels: dict = field(default_factory=dict)  # (a, b) -> MatchLabels
    seed: int = 0

    @property
    def pairs(self) -> list:
        return list(itertools.combinations(range(len(self.frames)), 2))

    def relative_gt(self, a: int, b: int) -> geo.RelativePose:
        return geo.RelativePose(geo.relative_pose(self.frames[a].pose, self.frames[b].pose))


# -- scene generation ---------------------------------------------------------

def _look_at(center: np.ndarray, target: np.ndarray) -> geo.Pose:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross([0.0, -1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return geo.Pose(R, -R @ center)


def visible(landmarks: np.ndarray, pose: geo.Pose, intr: geo.CameraIntrinsics, near: float = 0.1) -> np.ndarray:
    """Mask of landmarks in front of the camera and inside the image."""
    u = landmarks @ pose.R.T + pose.t
    front = u[:, 2] > near
    z = np.where(front, u[:, 2], 1.0)
    px = u[:, 0] / z * intr.fx + intr.cx
    py = u[:, 1] / z * intr.fy + intr.cy
    return front & (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)


def _overlap_sets(vis_a: np.ndarray, vis_b: np.ndarray) -> float:
    na, nb = int(vis_a.sum()), int(vis_b.sum())
    if min(na, nb) == 0:
        return 0.0
    return int(np.count_nonzero(vis_a & vis_b)) / min(na, nb)


def overlap(frame_a, frame_b, scene: Scene) -> float:
    """Co-visible fraction ``|V_a & V_b| / min(|V_a|, |V_b|)`` over scene landmarks.

    Frames may be Frame objects or camera indices into ``scene.cameras``.
    """
    def cam(f):
        return scene.cameras[f] if isinstance(f, (int, np.integer)) else (f.pose, f.intrinsics)

    (pa, ia), (pb, ib) = cam(frame_a), cam(frame_b)
    near = scene.config.near
    return _overlap_sets(visible(scene.landmarks, pa, ia, near), visible(scene.landmarks, pb, ib, near))


def _pairwise_overlaps(vis: list) -> list:
    return [_overlap_sets(vis[a], vis[b]) for a, b in itertools.combinations(range(len(vis)), 2)]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Landmarks uniform in a box and cameras on a jittered arc facing it.

    Draws are repeated until every camera sees at least ``keypoints``
    landmarks and all pairwise overlaps fall in ``overlap_range``.
    """
    rng = np.random.default_rng(seed)
    half = np.asarray(config.box_half, dtype=float)
    w, h = config.image_size
    n = config.n_frames
    lo, hi = config.overlap_range
    for _ in range(MAX_RETRIES):
        landmarks = rng.uniform(-half, half, size=(config.n_landmarks, 3))
        span = np.radians(config.arc_span_deg)
        angles = np.linspace(-span / 2, span / 2, n) + rng.normal(0, span / (4 * n), size=n)
        phase = rng.uniform(0, 2 * np.pi)
        order = rng.permutation(n)
        cameras, vis = [], []
        for k, a in enumerate(angles):
            center = np.array([config.arc_radius * np.sin(a), rng.normal(0, 0.2),
                               -config.arc_radius * np.cos(a)])
            ph = phase + 2 * np.pi * order[k] / n
            aim = config.aim_radius * np.array([np.cos(ph), np.sin(ph), 0.0])
            aim = aim + rng.normal(0, 0.1 * config.aim_radius, size=3)
            f = rng.uniform(*config.focal_range)
            intr = geo.CameraIntrinsics(f, f, w / 2, h / 2, w, h)
            pose = _look_at(center, aim)
            cameras.append((pose, intr))
            vis.append(visible(landmarks, pose, intr, config.near))
        if min(int(v.sum()) for v in vis) < config.keypoints:
            continue
        ov = _pairwise_overlaps(vis)
        if min(ov) < lo or max(ov) > hi:
            continue
        desc = _unit_rows(rng.normal(size=(config.n_landmarks, config.descriptor_dim)))
        return Scene(landmarks, desc, cameras, rng.uniform(size=config.n_landmarks), int(seed), config)
    raise GenerationError(f"no valid scene for seed {seed} after {MAX_RETRIES} draws")


# -- tuple rendering -----------------------------------------------------------

def render_tuple(scene: Scene, noise_px: float = 1.0, desc_noise: float = 0.1,
                 outlier_frac: float = 0.0, seed: int = 0,
                 thresholds: tuple | None = None) -> TupleSample:
    """Detect, perturb and label keypoints in every camera of ``scene``.

    Keypoints are the ``keypoints`` most salient visible landmarks (with
    per-view jitter so detections repeat only partly).  Outliers keep
    their position but carry the descriptor of an unrelated landmark.
    """
    from .training import LABEL_THRESHOLDS_INDOOR, generate_labels

    if noise_px < 0:
        raise ValueError("noise_px must be nonnegative")
    if not 0 <= outlier_frac <= 0.5:
        raise ValueError("outlier_frac must lie in [0, 0.5]")
    cfg = scene.config
    vis = [visible(scene.landmarks, p, i, cfg.near) for p, i in scene.cameras]
    ov = _pairwise_overlaps(vis)
    lo, hi = cfg.overlap_range
    if min(ov) < lo or max(ov) > hi:
        raise SamplingError(f"pairwise overlaps {np.round(ov, 3).tolist()} outside {cfg.overlap_range}")
    rng = np.random.default_rng(seed)
    K = cfg.keypoints

    chosen = []
    for v in vis:
        ids = np.flatnonzero(v)
        score = scene.saliency[ids] + rng.normal(0, cfg.saliency_jitter, size=ids.size)
        top = ids[np.argsort(-score, kind="stable")[:K]]
        chosen.append(top[rng.permutation(K)])
    in_tuple = np.unique(np.concatenate(chosen))

    frames = []
    n_out = int(round(outlier_frac * K))
    for (pose, intr), ids in zip(scene.cameras, chosen):
        u = scene.landmarks[ids] @ pose.R.T + pose.t
        px = geo.project(intr, u)
        if noise_px > 0:
            px = px + rng.normal(0, noise_px, size=px.shape)
        px = np.clip(px, 0.0, np.nextafter([intr.width, intr.height], 0))
        desc_src = scene.descriptors_gt[ids].copy()
        flags = np.zeros(K, dtype=bool)
        if n_out:
            slots = np.sort(rng.choice(K, size=n_out, replace=False))
            pool = np.setdiff1d(in_tuple, ids)
            if pool.size == 0:
                pool = np.setdiff1d(np.arange(len(scene.landmarks)), ids)
            desc_src[slots] = scene.descriptors_gt[rng.choice(pool, size=n_out, replace=pool.size < n_out)]
            flags[slots] = True
        desc = _unit_rows(desc_src + rng.normal(0, desc_noise, size=desc_src.shape))
        conf = rng.uniform(0.5, 1.0, size=K)
        kps = KeypointSet(px, conf, desc, (intr.width, intr.height))
        frames.append(Frame(intr, pose, kps, u[:, 2].copy(), ids, flags))

    sample = TupleSample(frames, seed=int(seed))
    th = LABEL_THRESHOLDS_INDOOR if thresholds is None else thresholds
    for a, b in sample.pairs:
        sample.labels[(a, b)] = generate_labels(frames[a], frames[b], th)
    return sample


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    tuples: list
    seed: int
    config: dict = field(default_factory=dict)
    version: int = DATASET_VERSION

    def __len__(self):
        return len(self.tuples)

    def split(self, n_first: int) -> tuple:
        return (Dataset(self.tuples[:n_first], self.seed, self.config),
                Dataset(self.tuples[n_first:], self.seed, self.config))


def tuple_seeds(seed: int, n: int) -> list:
    """Independent per-tuple seeds derived from one dataset seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def _make_tuple(args) -> TupleSample:
    config, tseed, noise_px, desc_noise, outlier_frac, thresholds = args
    scene_seed, render_seed = np.random.SeedSequence(tseed).generate_state(2, dtype=np.uint64)
    scene = generate_scene(config, int(scene_seed))
    return render_tuple(scene, noise_px, desc_noise, outlier_frac, int(render_seed), thresholds)


def generate_dataset(config: SceneConfig, n_tuples: int, seed: int, noise_px: float = 1.0,
                     desc_noise: float = 0.1, outlier_frac: float = 0.0,
                     thresholds: tuple | None = None, jobs: int = 1) -> Dataset:
    args = [(config, s, noise_px, desc_noise, outlier_frac, thresholds) for s in tuple_seeds(seed, n_tuples)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            tuples = list(pool.map(_make_tuple, args))
    else:
        tuples = [_make_tuple(a) for a in args]
    meta = {"scene": config.to_dict(), "noise_px": noise_px, "desc_noise": desc_noise,
            "outlier_frac": outlier_frac}
    return Dataset(tuples, int(seed), meta)


def _frame_to_dict(f: Frame) -> dict:
    return {
        "intrinsics": f.intrinsics.to_dict(),
        "pose_gt": {"R": f.pose.R.reshape(-1).tolist(), "t": f.pose.t.tolist()},
        "keypoints": f.keypoints.to_dict(),
        "depths": f.depths.tolist(),
        "landmark_ids": f.landmark_ids.tolist(),
    }


def _frame_from_dict(d: dict, flags) -> Frame:
    pose = geo.Pose(np.array(d["pose_gt"]["R"], dtype=float).reshape(3, 3), np.array(d["pose_gt"]["t"], dtype=float))
    ids = np.array(d.get("landmark_ids", [-1] * len(d["depths"])), dtype=int)
    intr = geo.CameraIntrinsics.from_dict(d["intrinsics"])
    kps = KeypointSet.from_dict(d["keypoints"], (intr.width, intr.height))
    return Frame(intr, pose, kps, np.array(d["depths"], dtype=float), ids, np.array(flags, dtype=bool))


def dataset_to_dict(ds: Dataset) -> dict:
    tuples = []
    for s in ds.tuples:
        labels = [{"a": a, "b": b, **lab.to_dict()} for (a, b), lab in sorted(s.labels.items())]
        tuples.append({
            "seed": s.seed,
            "frames": [_frame_to_dict(f) for f in s.frames],
            "labels": labels,
            "outlier_flags": [f.outliers.astype(int).tolist() for f in s.frames],
        })
    return {"version": ds.version, "seed": ds.seed, "config": ds.config, "tuples": tuples}


def dataset_from_dict(d: dict) -> Dataset:
    from .training import MatchLabels

    if d.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {d.get('version')}")
    tuples = []
    for t in d["tuples"]:
        flags = t.get("outlier_flags") or [[0] * len(f["depths"]) for f in t["frames"]]
        frames = [_frame_from_dict(f, fl) for f, fl in zip(t["frames"], flags)]
        labels = {(lab["a"], lab["b"]): MatchLabels.from_dict(lab) for lab in t.get("labels", [])}
        tuples.append(TupleSample(frames, labels, int(t.get("seed", 0))))
    return Dataset(tuples, int(d["seed"]), d.get("config", {}), int(d["version"]))


def save_dataset(ds: Dataset, path) -> None:
    # repr-based float output round-trips every double exactly
    Path(path).write_text(json.dumps(dataset_to_dict(ds)))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(json.loads(Path(path).read_text()))
