"""Run configuration: profiles, flat key = value files and overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from . import matcher as mt
from . import multiview as mv
from . import posesolver as ps
from . import synthdata as sd
from . import training as tr
from .errors import ConfigError

SEED_ENV = "PKE2_SEED"
SCHEDULES = {"toy": mt.SCHEDULE_TOY, "multiview": mt.SCHEDULE_MULTIVIEW, "two_view": mt.SCHEDULE_TWO_VIEW}


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    # matcher
    dim: int = 32
    heads: int = mt.HEADS
    schedule: str = "toy"
    sinkhorn_iters: int = 30
    mode: str = "joint"
    conf_threshold: float | None = None
    # synthetic data
    n_landmarks: int = 200
    n_frames: int = 5
    keypoints: int = 24
    noise_px: float = 1.0
    desc_noise: float = 0.1
    outliers: float = 0.0
    # pose
    solver: str = "8pt+ba"
    ba_iters: int = ps.T_TEST
    beta0: float = ps.BETA0
    # training
    lr: float = 1e-3
    lr_stage2: float = 3e-4
    decay: float = 1.0
    decay_after: int = 0
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    lambda_rot: float = 3.0
    lambda_pose_max: float = 242.0
    lambda_match_min: float = 1.0
    ramp_iters: int = 500
    val_every: int = 500
    val_tuples: int = 20
    label_thresholds: tuple = tr.LABEL_THRESHOLDS_INDOOR
    # evaluation
    pipeline: str = "multiview"
    auc_thresholds: tuple = mv.AUC_THRESHOLDS

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {sorted(SCHEDULES)}")
        for key, allowed in (("mode", ("joint", "pairwise")), ("solver", ("8pt", "8pt+ba")),
                             ("pipeline", ("multiview", "two_view"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.ba_iters < 0 or self.ramp_iters < 1:
            raise ConfigError("ba_iters must be >= 0 and ramp_iters >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def matcher(self) -> mt.MatcherConfig:
        return mt.MatcherConfig(dim=self.dim, heads=self.heads, schedule=SCHEDULES[self.schedule],
                                sinkhorn_iters=self.sinkhorn_iters)

    def scene(self) -> sd.SceneConfig:
        return sd.SceneConfig(n_landmarks=self.n_landmarks, n_frames=self.n_frames, keypoints=self.keypoints,
                              descriptor_dim=self.dim)

    def train(self) -> tr.TrainConfig:
        sched = tr.LossSchedule(self.lambda_pose_max, self.lambda_match_min, self.ramp_iters, self.lambda_rot)
        return tr.TrainConfig(self.matcher(), sched, self.mode, self.stage1_iters, self.stage2_iters, self.lr,
                              self.decay, self.decay_after, self.val_every, self.val_tuples,
                              lr_stage2=self.lr_stage2)

    def evaluation(self, oracle: bool = False) -> mv.EvalConfig:
        return mv.EvalConfig(self.pipeline, self.mode, self.solver, self.ba_iters, self.beta0, self.conf_threshold,
                             tuple(self.auc_thresholds), oracle)


PROFILES = {
    "toy": {},
    "paper": {"dim": 256, "schedule": "multiview", "sinkhorn_iters": mt.SINKHORN_ITERS, "lr": 1e-4,
              "lr_stage2": 1e-4, "decay": 0.999992, "decay_after": 100000, "stage1_iters": 200000,
              "stage2_iters": 200000, "ramp_iters": 40000, "lambda_match_min": 0.01, "val_every": 5000},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse(key: str, text):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(text, str):
        return text
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if key == "conf_threshold":
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def parse_file(path) -> dict:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _parse(k, v)
    return out


def parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse(k.strip(), v)
    return out


def resolve(profile: str | None = None, path=None, sets=None, flags: dict | None = None,
            env: dict | None = None) -> RunConfig:
    """Profile defaults < config file < command-line flags < ``--set``.

    The seed falls back to $PKE2_SEED, then 0, when no layer sets it.
    """
    env = os.environ if env is None else env
    layers = [parse_file(path) if path else {}]
    layers.append({k: _parse(k, v) for k, v in (flags or {}).items() if v is not None})
    layers.append(parse_sets(sets))
    chosen = profile
    for layer in layers:
        chosen = layer.get("profile", chosen)
    chosen = chosen or "toy"
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}")
    values = dict(PROFILES[chosen], profile=chosen)
    for layer in layers:
        values.update(layer)
    if "seed" not in values and env.get(SEED_ENV):
        values["seed"] = _parse("seed", env[SEED_ENV])
    return RunConfig(**values)
