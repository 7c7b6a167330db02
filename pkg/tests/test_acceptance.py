"""End-to-end acceptance checks, one test per criterion.

Each test records its measured values through the ``criterion`` fixture so the
session summary prints a PASS/FAIL line per criterion.  Tolerances are fixed
here and never relaxed to make a run pass.
"""

import itertools
import json
import time

import numpy as np
import pytest

from mvmatch import cli
from mvmatch import config as cf
from mvmatch import diffcore as dc
from mvmatch import geometry as geo
from mvmatch import matcher as mt
from mvmatch import multiview as mv
from mvmatch import posesolver as ps
from mvmatch import synthdata as sd
from mvmatch import training as tr

from support import INTR, perturbed, same_up_to_sign, two_view
from test_matcher import double_argmax_oracle, random_frames
from test_multiview import absolute_poses, auc_oracle, brute_force_max_tree, edges_from
from test_training import reprojection_oracle


def test_c1_geometric_exactness(criterion):
    rng = np.random.default_rng(0)
    scenes = [two_view(rng, 20) for _ in range(100)]
    worst = 0.0
    t0 = time.perf_counter()
    for R, t, _, xa, xb in scenes:
        m = ps.WeightedMatches(xa, xb)
        est = ps.recover_pose(ps.weighted_eight_point(m), m, INTR, INTR)
        err = geo.pose_error(est, geo.RelativePose(geo.Pose(R, t)))
        worst = max(worst, err.rotation_deg, err.translation_deg)
    elapsed = time.perf_counter() - t0
    criterion(1, f"worst error {worst:.2e} deg (< 1e-4), {elapsed:.3f} s (< 1)")
    assert worst < 1e-4 and elapsed < 1.0


def test_c2_weighting_semantics(criterion):
    rng = np.random.default_rng(1)
    zero_gap = scale_gap = 0.0
    for _ in range(20):
        _, _, _, xa, xb = two_view(rng, 30, noise=1.0)
        n_out = int(rng.integers(1, 10))
        bad = xb.copy()
        bad[:n_out] = rng.uniform([0, 0], [640, 480], size=(n_out, 2))
        w = rng.uniform(0.1, 1.0, size=30)
        w[:n_out] = 0.0
        F_all = ps.weighted_eight_point(ps.WeightedMatches(xa, bad, w))
        F_in = ps.weighted_eight_point(ps.WeightedMatches(xa[n_out:], xb[n_out:], w[n_out:]))
        zero_gap = max(zero_gap, same_up_to_sign(F_all, F_in))
        w = rng.uniform(0.1, 1.0, size=30)
        F1 = ps.weighted_eight_point(ps.WeightedMatches(xa, xb, w))
        F2 = ps.weighted_eight_point(ps.WeightedMatches(xa, xb, w * rng.uniform(0.01, 100.0)))
        scale_gap = max(scale_gap, same_up_to_sign(F1, F2))
    criterion(2, f"zero-weight gap {zero_gap:.1e}, scaling gap {scale_gap:.1e} (< 1e-10)")
    assert zero_gap < 1e-10 and scale_gap < 1e-10


def test_c3_differentiability_suite(criterion, tmp_path):
    limits = {"sinkhorn": 1e-4, "eight_point_weights": 1e-3, "eight_point_coords": 1e-3,
              "ba_unroll": 1e-2, "stage2_loss": 1e-2}
    out = tmp_path / "gc.json"
    t0 = time.perf_counter()
    code = cli.main(["gradcheck", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    checks = {c["name"]: c["error"] for c in json.loads(out.read_text())["checks"]}
    ok = set(checks) == set(limits) and all(checks[k] < limits[k] for k in limits)
    criterion(3, ", ".join(f"{k} {v:.1e}" for k, v in checks.items()) + f"; {elapsed:.1f} s (< 60)")
    assert code == 0 and ok and elapsed < 60


def test_c4_ba_efficacy(criterion):
    rmse_ok = energy_ok = 0
    elapsed = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        R, t, _, xa, xb = two_view(rng, 30, noise=1.0)
        init = perturbed(rng, R, t)
        t0 = time.perf_counter()
        res = ps.bundle_adjust(init, ps.WeightedMatches(xa, xb), INTR, INTR, T=10, beta0=0.1)
        elapsed += time.perf_counter() - t0
        rmse_ok += res.final_rmse <= 0.5 * res.initial_rmse
        energy_ok += res.final_energy <= res.initial_energy
    both = min(rmse_ok, energy_ok)
    criterion(4, f"rmse halved {rmse_ok}/100, energy not increased {energy_ok}/100 (>= 95), {elapsed:.2f} s (< 10)")
    assert both >= 95 and elapsed < 10


def test_c5_message_accounting(criterion):
    cfg = mt.MatcherConfig(schedule=mt.SCHEDULE_MULTIVIEW, sinkhorn_iters=2)
    w = mt.MatcherWeights.init(cfg, 0)
    frames = random_frames(np.random.default_rng(0), n=5, k=16, dim=cfg.dim)
    got = {}
    for mode in ("joint", "pairwise"):
        counter = mt.MessageCounter()
        mt.forward_tuple(frames, w, mode, counter=counter)
        got[mode] = counter.per_layer
    criterion(5, f"joint (self, cross) {got['joint']}, pairwise {got['pairwise']}")
    assert got == {"joint": (1280, 5120), "pairwise": (5120, 5120)}


# -- toy training ---------------------------------------------------------------

def _toy_run(mode):
    cfg = cf.resolve("toy", sets=["val_tuples=40", f"mode={mode}"], env={})
    t0 = time.perf_counter()
    ds = sd.generate_dataset(cfg.scene(), 200, seed=cfg.seed, outlier_frac=0.2)
    train, val = ds.split(160)
    res = tr.train_toy(train, cfg.train(), seed=cfg.seed, val=val)
    return val, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy_joint():
    return _toy_run("joint")


def test_c6_toy_training(criterion, toy_joint):
    val, res, elapsed = toy_joint
    stage1_end = [r for r in res.records if r["stage"] == 2][0]  # stage 2 validates before its first step
    stage2_end = res.records[-1]
    drop = 1.0 - stage2_end["pose_loss"] / stage1_end["pose_loss"]
    margin, n_good, n_bad = tr.confidence_margin(val, res.weights, "joint")
    criterion(6, f"pose loss {stage1_end['pose_loss']:.3f} -> {stage2_end['pose_loss']:.3f} "
                 f"({100 * drop:.1f}% drop, >= 10%); margin {margin:.3f} (>= 0.3, {n_good}/{n_bad} matches); "
                 f"two-view AUC@10 {stage1_end['val_auc']:.2f} -> {stage2_end['val_auc']:.2f}; "
                 f"{elapsed:.0f} s (<= 1800)")
    assert drop >= 0.10
    assert margin >= 0.3
    assert stage2_end["val_auc"] > stage1_end["val_auc"]
    assert elapsed <= 1800


def test_c7_joint_not_worse_than_pairwise(criterion, toy_joint):
    val, res_joint, _ = toy_joint
    res_pair = _toy_run("pairwise")[1]
    scores = {}
    for mode, res in (("joint", res_joint), ("pairwise", res_pair)):
        ev = mv.EvalConfig(pipeline="multiview", mode=mode, thresholds=(10.0,))
        scores[mode] = mv.evaluate_tuples(val, res.weights, ev).pose_auc[0]
    criterion(7, f"multiview AUC@10 joint {scores['joint']:.2f}, pairwise {scores['pairwise']:.2f}")
    assert scores["joint"] >= scores["pairwise"]


# -- oracles and determinism ------------------------------------------------------

def test_c8_pipeline_oracles(criterion):
    rng = np.random.default_rng(8)
    auc_gap = 0.0
    for _ in range(200):
        errors = np.abs(rng.normal(scale=rng.uniform(1, 30), size=int(rng.integers(1, 40))))
        th = float(rng.uniform(1, 30))
        auc_gap = max(auc_gap, abs(mv.auc(errors, [th])[0] - auc_oracle(errors, th)))

    tree_ok = 0
    for n in (2, 3, 4, 5):
        for _ in range(25):
            keys = list(itertools.combinations(range(n), 2))
            inl = [int(v) for v in rng.integers(0, 6, size=len(keys))]
            edges = edges_from(absolute_poses(rng, n), keys, inl)
            tree, _ = mv.max_spanning_tree(n, edges)
            tree_ok += sum(edges[k].inliers for k in tree) == brute_force_max_tree(n, dict(zip(keys, inl)))

    ds = sd.generate_dataset(sd.SceneConfig(), 4, seed=8, noise_px=1.5, outlier_frac=0.2)
    label_ok = label_n = 0
    for s in ds.tuples:
        for (a, b), lab in s.labels.items():
            label_ok += lab.as_sets() == reprojection_oracle(s.frames[a], s.frames[b], tr.LABEL_THRESHOLDS_INDOOR)
            label_n += 1

    extract_ok = 0
    for _ in range(100):
        m, n = (int(v) for v in rng.integers(1, 9, size=2))
        P = np.exp(mt.sinkhorn_log(dc.tensor(rng.normal(scale=3, size=(m, n))), 0.0, 50).data)
        extract_ok += [(i, j) for i, j, _ in mt.extract_matches(P)] == double_argmax_oracle(P)

    criterion(8, f"AUC gap {auc_gap:.1e} (< 1e-9); trees {tree_ok}/100; labels {label_ok}/{label_n}; "
                 f"extraction {extract_ok}/100")
    assert auc_gap < 1e-9 and tree_ok == 100 and label_ok == label_n and extract_ok == 100


def test_c9_cli_determinism(criterion, tmp_path):
    def run(*argv):
        return cli.main([str(a) for a in argv])

    tiny = ["--set", "stage1_iters=3", "--set", "stage2_iters=2", "--set", "val_every=2", "--set", "val_tuples=1"]
    same = {}
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        codes = [
            run("gen", "--tuples", 6, "--seed", 11, "--outliers", 0.2, "--out", d / "data.json"),
            run("match", "--data", d / "data.json", "--seed", 11, "--out", d / "match.json"),
            run("pose", "--data", d / "data.json", "--seed", 11, "--out", d / "pose.json"),
            run("multiview", "--data", d / "data.json", "--seed", 11, "--out", d / "mv.json"),
            run("eval", "--data", d / "data.json", "--seed", 11, "--pipeline", "two_view", "--out", d / "eval.json"),
            run("train", "--data", d / "data.json", "--seed", 11, "--val", 1, "--out", d / "w.bin",
                "--log", d / "train.jsonl", *tiny),
            run("gradcheck", "--seed", 11, "--out", d / "gc.json"),
        ]
        assert codes[0] == 0 and codes[-2:] == [0, 0]
        for f in sorted(d.iterdir()):
            same.setdefault(f.name, []).append(f.read_bytes())
    identical = sorted(name for name, blobs in same.items() if blobs[0] == blobs[1])
    differing = sorted(set(same) - set(identical))
    criterion(9, f"{len(identical)}/{len(same)} outputs bitwise identical" + (f"; differ: {differing}" if differing else ""))
    assert not differing and len(same) == 8
