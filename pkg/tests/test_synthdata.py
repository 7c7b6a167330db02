import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvmatch import geometry as geo
from mvmatch import synthdata as sd
from mvmatch.errors import GenerationError, SamplingError

CFG = sd.SceneConfig()


@pytest.fixture(scope="module")
def scene():
    return sd.generate_scene(CFG, 11)


def scenes_equal(a, b):
    assert np.array_equal(a.landmarks, b.landmarks)
    assert np.array_equal(a.descriptors_gt, b.descriptors_gt)
    for (pa, ia), (pb, ib) in zip(a.cameras, b.cameras):
        assert np.array_equal(pa.R, pb.R) and np.array_equal(pa.t, pb.t) and ia == ib


def test_scene_is_deterministic(scene):
    scenes_equal(scene, sd.generate_scene(CFG, 11))


def test_scene_defaults():
    assert (CFG.n_landmarks, CFG.n_frames, CFG.keypoints) == (200, 5, 24)
    assert CFG.overlap_range == (0.4, 0.8)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_scene_overlaps_in_range_and_enough_visible(seed):
    s = sd.generate_scene(CFG, seed)
    for k, (pose, intr) in enumerate(s.cameras):
        assert sd.visible(s.landmarks, pose, intr, CFG.near).sum() >= CFG.keypoints
        for j in range(k + 1, len(s.cameras)):
            assert 0.4 <= sd.overlap(k, j, s) <= 0.8


def test_visible_depths_positive(scene):
    for pose, intr in scene.cameras:
        v = sd.visible(scene.landmarks, pose, intr)
        z = (scene.landmarks @ pose.R.T + pose.t)[:, 2]
        assert np.all(z[v] > 0)


def test_overlap_identity_symmetry_and_disjoint(scene):
    assert sd.overlap(0, 0, scene) == 1.0
    assert sd.overlap(1, 3, scene) == sd.overlap(3, 1, scene)
    pose, intr = scene.cameras[0]
    flip = geo.Pose(np.diag([-1.0, 1.0, -1.0]) @ pose.R, np.diag([-1.0, 1.0, -1.0]) @ pose.t)
    fake = sd.Frame(intr, flip, None, None, None, None)
    assert sd.overlap(0, fake, scene) == 0.0


def test_generation_error_when_impossible():
    cfg = dataclasses.replace(CFG, overlap_range=(0.99, 1.0))
    with pytest.raises(GenerationError):
        sd.generate_scene(cfg, 0)


def test_render_rejects_bad_overlap(scene):
    tight = dataclasses.replace(scene, config=dataclasses.replace(CFG, overlap_range=(0.95, 1.0)))
    with pytest.raises(SamplingError):
        sd.render_tuple(tight)


def test_render_validates_arguments(scene):
    with pytest.raises(ValueError):
        sd.render_tuple(scene, noise_px=-1)
    with pytest.raises(ValueError):
        sd.render_tuple(scene, outlier_frac=0.6)


def test_noise_free_labels_pair_every_shared_landmark(scene):
    t = sd.render_tuple(scene, noise_px=0.0, desc_noise=0.0, seed=3)
    for (a, b), lab in t.labels.items():
        ids_a, ids_b = t.frames[a].landmark_ids, t.frames[b].landmark_ids
        expected = {(int(i), int(np.flatnonzero(ids_b == l)[0])) for i, l in enumerate(ids_a) if l in ids_b}
        assert lab.as_sets()[0] == expected


def test_keypoints_inside_image_with_positive_depth(scene):
    t = sd.render_tuple(scene, noise_px=2.0, seed=5)
    for f in t.frames:
        assert len(f.keypoints) == CFG.keypoints
        assert np.all(f.depths > 0)
        c = f.keypoints.coords
        assert np.all((c >= 0) & (c < [f.intrinsics.width, f.intrinsics.height]))
        assert np.all((f.keypoints.confidences >= 0.5) & (f.keypoints.confidences <= 1.0))
        np.testing.assert_allclose(np.linalg.norm(f.keypoints.descriptors, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("frac", [0.1, 0.2, 0.3])
def test_outlier_count_and_flags(scene, frac):
    t = sd.render_tuple(scene, outlier_frac=frac, seed=7)
    for f in t.frames:
        assert abs(int(f.outliers.sum()) - frac * CFG.keypoints) <= 1
    for (a, b), lab in t.labels.items():
        assert not np.any(t.frames[a].outliers[lab.matches[:, 0]])
        assert not np.any(t.frames[b].outliers[lab.matches[:, 1]])
        assert not np.any(t.frames[a].outliers[lab.unmatched_a])


def test_outlier_descriptor_belongs_to_another_landmark(scene):
    t = sd.render_tuple(scene, desc_noise=0.0, outlier_frac=0.2, seed=8)
    for f in t.frames:
        own = scene.descriptors_gt[f.landmark_ids]
        same = np.abs(np.sum(own * f.keypoints.descriptors, axis=1) - 1.0) < 1e-12
        assert np.array_equal(~same, f.outliers)


def test_reprojection_invariant_statistics():
    """GT matches transfer within the 5 px label threshold; the 4-sigma fraction matches its law.

    With sigma = 1 px in both views the transfer error is Rayleigh with scale
    sqrt(2), truncated at 5 px by the labels: P(d <= 4) = (1 - e^-4) / (1 - e^-6.25).
    """
    ds = sd.generate_dataset(CFG, 30, seed=4, noise_px=1.0)
    d = []
    for s in ds.tuples:
        for (a, b), lab in s.labels.items():
            fa, fb = s.frames[a], s.frames[b]
            world = (geo.backproject(fa.intrinsics, fa.keypoints.coords, fa.depths) - fa.pose.t) @ fa.pose.R
            proj = geo.project(fb.intrinsics, fb.pose.apply(world[lab.matches[:, 0]]))
            d.append(np.linalg.norm(proj - fb.keypoints.coords[lab.matches[:, 1]], axis=1))
    d = np.concatenate(d)
    assert d.size > 1000
    assert np.all(d < 5.0)
    p = (1 - np.exp(-4.0)) / (1 - np.exp(-6.25))
    frac = np.mean(d <= 4.0)
    assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / d.size)


def test_dataset_is_deterministic_and_parallel_safe():
    a = sd.dataset_to_dict(sd.generate_dataset(CFG, 4, seed=9, outlier_frac=0.2))
    b = sd.dataset_to_dict(sd.generate_dataset(CFG, 4, seed=9, outlier_frac=0.2, jobs=2))
    assert a == b


def test_dataset_json_round_trip(tmp_path):
    ds = sd.generate_dataset(CFG, 3, seed=2, outlier_frac=0.2)
    path = tmp_path / "d.json"
    sd.save_dataset(ds, path)
    back = sd.load_dataset(path)
    assert sd.dataset_to_dict(back) == sd.dataset_to_dict(ds)
    for s0, s1 in zip(ds.tuples, back.tuples):
        for f0, f1 in zip(s0.frames, s1.frames):
            assert np.array_equal(f0.keypoints.coords, f1.keypoints.coords)
            assert np.array_equal(f0.keypoints.descriptors, f1.keypoints.descriptors)
            assert np.array_equal(f0.pose.R, f1.pose.R)
            assert np.array_equal(f0.outliers, f1.outliers)
        assert s0.labels.keys() == s1.labels.keys()


def test_dataset_top_level_schema():
    d = sd.dataset_to_dict(sd.generate_dataset(CFG, 1, seed=0))
    assert {"version", "seed", "tuples"} <= d.keys()
    frame = d["tuples"][0]["frames"][0]
    assert {"intrinsics", "pose_gt", "keypoints", "depths"} <= frame.keys()
    assert len(frame["pose_gt"]["R"]) == 9
    assert {"coords", "confidences", "descriptors"} <= frame["keypoints"].keys()


def test_bad_version_rejected():
    d = sd.dataset_to_dict(sd.generate_dataset(CFG, 1, seed=0))
    d["version"] = 99
    with pytest.raises(ValueError):
        sd.dataset_from_dict(d)
