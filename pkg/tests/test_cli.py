import json

import numpy as np
import pytest

from mvmatch import cli
from mvmatch import config as cf
from mvmatch import matcher as mt
from mvmatch import synthdata as sd
from mvmatch.errors import ConfigError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def clean_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "clean.json"
    assert run("gen", "--tuples", 3, "--seed", 7, "--set", "noise_px=0", "--set", "desc_noise=0", "--out", path) == 0
    return path


# -- configuration --------------------------------------------------------------

def test_profiles_and_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nba_iters = 4\nlr = 0.5  # trailing\nauc_thresholds = 1, 2\n")
    cfg = cf.resolve(None, f, ["lr=0.25"], {"ba_iters": 6}, env={})
    assert (cfg.ba_iters, cfg.lr, cfg.auc_thresholds) == (6, 0.25, (1.0, 2.0))
    paper = cf.resolve("paper", env={})
    assert paper.dim == 256 and paper.matcher().schedule == mt.SCHEDULE_MULTIVIEW and paper.lr == 1e-4
    assert cf.resolve(env={}).matcher() == mt.MatcherConfig()


def test_seed_env_fallback():
    assert cf.resolve(env={"PKE2_SEED": "41"}).seed == 41
    assert cf.resolve(flags={"seed": 3}, env={"PKE2_SEED": "41"}).seed == 3
    assert cf.resolve(env={}).seed == 0


@pytest.mark.parametrize("bad", [["nonsense=1"], ["ba_iters=x"], ["mode=sideways"], ["noequals"]])
def test_bad_settings_rejected(bad):
    with pytest.raises(ConfigError):
        cf.resolve(sets=bad, env={})


def test_unknown_key_in_file_exits_2(tmp_path, clean_data):
    f = tmp_path / "bad.cfg"
    f.write_text("whatever = 3\n")
    assert run("eval", "--data", clean_data, "--oracle", "--config", f) == 2
    assert run("eval", "--data", tmp_path / "missing.json", "--oracle") == 2


# -- gen ------------------------------------------------------------------------

def test_gen_count_determinism_and_echo(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("gen", "--profile", "toy", "--tuples", 100, "--seed", 7, "--out", a) == 0
    assert run("gen", "--profile", "toy", "--tuples", 100, "--seed", 7, "--out", b, "--jobs", 2) == 0
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert len(d["tuples"]) == 100
    assert d["config"]["run_config"]["seed"] == 7 and d["config"]["run_config"]["profile"] == "toy"


def test_gen_env_seed_and_outliers(tmp_path, monkeypatch):
    monkeypatch.setenv("PKE2_SEED", "7")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("gen", "--tuples", 2, "--outliers", 0.2, "--out", a) == 0
    assert run("gen", "--tuples", 2, "--outliers", 0.2, "--seed", 7, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    ds = sd.load_dataset(a)
    assert all(abs(int(f.outliers.sum()) - 0.2 * 24) <= 1 for s in ds.tuples for f in s.frames)


# -- match / pose / multiview / eval ---------------------------------------------------

def test_pose_noise_free_oracle(tmp_path, clean_data):
    out = tmp_path / "p.json"
    code = run("pose", "--data", clean_data, "--oracle", "--solver", "8pt+ba", "--out", out)
    d = json.loads(out.read_text())
    assert d["run_config"]["ba_iters"] == 10 and d["run_config"]["solver"] == "8pt+ba"
    solved = [p for t in d["tuples"] for p in t["pairs"] if "error" not in p]
    assert len(solved) >= 20
    assert max(max(p["rotation_deg"], p["translation_deg"]) for p in solved) < 1e-3
    failed = [p for t in d["tuples"] for p in t["pairs"] if "error" in p]
    assert code == (3 if failed else 0)
    assert all("matches (< 8)" in p["error"] for p in failed)


def test_match_modes_threshold_and_jobs(tmp_path, clean_data):
    outs = {}
    for mode in ("joint", "pairwise"):
        outs[mode] = tmp_path / f"{mode}.json"
        assert run("match", "--data", clean_data, "--mode", mode, "--out", outs[mode]) == 0
    j, p = (json.loads(outs[m].read_text()) for m in ("joint", "pairwise"))
    assert j["run_config"]["conf_threshold"] is None
    assert j["tuples"] != p["tuples"]
    par = tmp_path / "par.json"
    assert run("match", "--data", clean_data, "--mode", "joint", "--jobs", 2, "--out", par) == 0
    assert par.read_bytes() == outs["joint"].read_bytes()
    thr = tmp_path / "thr.json"
    assert run("match", "--data", clean_data, "--conf-threshold", 0.5, "--out", thr) == 0
    assert all(m[4] >= 0.5 for t in json.loads(thr.read_text())["tuples"] for m in t["matches"])


def test_multiview_and_eval(tmp_path, clean_data):
    out = tmp_path / "mv.json"
    assert run("multiview", "--data", clean_data, "--oracle", "--out", out) == 0
    d = json.loads(out.read_text())
    assert min(d["report"]["pose_auc"]) > 99
    assert d["tuples"][0]["absolute"][0] == {"R": [1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0], "t": [0, 0, 0]}
    a, b = tmp_path / "e1.json", tmp_path / "e2.json"
    assert run("eval", "--data", clean_data, "--oracle", "--pipeline", "two_view", "--out", a) == 0
    assert run("eval", "--data", clean_data, "--oracle", "--pipeline", "two_view", "--out", b, "--jobs", 2) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["report"]["thresholds"] == [5.0, 10.0, 20.0]


# -- train ----------------------------------------------------------------------

TINY = ["--set", "stage1_iters=3", "--set", "stage2_iters=2", "--set", "val_every=2", "--set", "val_tuples=1"]


def test_train_two_stage_reproducible(tmp_path):
    data = tmp_path / "d.json"
    assert run("gen", "--tuples", 4, "--seed", 3, "--out", data) == 0
    logs = []
    for k in range(2):
        w1, w2 = tmp_path / f"s1_{k}.bin", tmp_path / f"s2_{k}.bin"
        l1, l2 = tmp_path / f"s1_{k}.jsonl", tmp_path / f"s2_{k}.jsonl"
        assert run("train", "--data", data, "--val", 1, "--stage", 1, "--out", w1, "--log", l1, *TINY) == 0
        assert run("train", "--data", data, "--val", 1, "--stage", 2, "--init", w1, "--out", w2, "--log", l2,
                   *TINY) == 0
        # the stage-2 header echoes the (different) --init path; records and weights must agree
        logs.append((l1.read_bytes(), l2.read_bytes().splitlines()[1:], w2.read_bytes()))
    assert logs[0] == logs[1]
    head = json.loads((tmp_path / "s2_0.jsonl").read_text().splitlines()[0])
    assert head["stages"] == [2] and head["init"].endswith("s1_0.bin")
    assert [json.loads(r)["stage"] for r in logs[0][0].splitlines()[1:]] == [1, 1, 1]


def test_train_divergence_exit_4(tmp_path):
    data = tmp_path / "d.json"
    assert run("gen", "--tuples", 3, "--seed", 4, "--out", data) == 0
    w = mt.MatcherWeights.init(mt.MatcherConfig(), 0)
    w.params["W4"] = w.params["W4"] * np.inf
    bad = tmp_path / "bad.bin"
    w.save(bad)
    assert run("train", "--data", data, "--val", 0, "--stage", 1, "--init", bad, "--out", tmp_path / "o.bin",
               *TINY) == 4


def test_train_rejects_mismatched_init(tmp_path):
    data = tmp_path / "d.json"
    assert run("gen", "--tuples", 2, "--seed", 4, "--out", data) == 0
    other = tmp_path / "other.bin"
    mt.MatcherWeights.init(mt.MatcherConfig(dim=16), 0).save(other)
    assert run("train", "--data", data, "--val", 0, "--init", other, "--out", tmp_path / "o.bin", *TINY) == 2


# -- gradcheck --------------------------------------------------------------------

def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert run("gradcheck", "--out", out) == 0
    d = json.loads(out.read_text())
    assert d["eps"] == 1e-5
    assert [c["name"] for c in d["checks"]] == ["sinkhorn", "eight_point_weights", "eight_point_coords",
                                                "ba_unroll", "stage2_loss"]
    assert all(c["ok"] for c in d["checks"])
    assert "stage2_loss" in capsys.readouterr().err
