"""mvmatch command line: gen, match, pose, multiview, train, eval, gradcheck.

Exit codes: 0 ok, 1 gradcheck failure, 2 configuration or input error,
3 pose solver failure (output still written), 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cf
from . import geometry as geo
from . import gradcheck as gc
from . import matcher as mt
from . import multiview as mv
from . import synthdata as sd
from . import training as tr
from .errors import ConfigError, DegenerateConfigurationError, DivergenceError, MvMatchError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("mvmatch")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=sorted(cf.PROFILES))
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="dataset JSON")
    data.add_argument("--jobs", type=int, default=1)

    matching = argparse.ArgumentParser(add_help=False)
    matching.add_argument("--weights", help="weights file (seeded initial weights when omitted)")
    matching.add_argument("--oracle", action="store_true", help="use ground-truth matches")
    matching.add_argument("--mode", choices=("joint", "pairwise"))
    matching.add_argument("--conf-threshold", type=float)

    solving = argparse.ArgumentParser(add_help=False)
    solving.add_argument("--solver", choices=("8pt", "8pt+ba"))
    solving.add_argument("--ba-iters", type=int)

    p = argparse.ArgumentParser(prog="mvmatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--tuples", type=int, default=100)
    g.add_argument("--outliers", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--jobs", type=int, default=1)

    sub.add_parser("match", parents=[common, data, matching], help="match every tuple")
    sub.add_parser("pose", parents=[common, data, matching, solving], help="two-view pose per pair")
    sub.add_parser("multiview", parents=[common, data, matching, solving], help="absolute poses per tuple")

    e = sub.add_parser("eval", parents=[common, data, matching, solving], help="pose AUC report")
    e.add_argument("--pipeline", choices=("multiview", "two_view"))

    t = sub.add_parser("train", parents=[common], help="train the matcher")
    t.add_argument("--data", required=True)
    t.add_argument("--val", type=int, default=40, help="hold out this many trailing tuples for validation")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--init", help="weights to start from")
    t.add_argument("--log", help="metrics log (JSON lines)")
    t.add_argument("--mode", choices=("joint", "pairwise"))

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    c.add_argument("--eps", type=float, default=1e-5)
    return p


def _flags(args) -> dict:
    names = {"profile": "profile", "seed": "seed", "mode": "mode", "conf_threshold": "conf_threshold",
             "solver": "solver", "ba_iters": "ba_iters", "outliers": "outliers", "noise": "noise_px",
             "pipeline": "pipeline"}
    return {key: getattr(args, attr) for attr, key in names.items() if getattr(args, attr, None) is not None}


def _emit(payload: dict, out) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_dataset(path) -> sd.Dataset:
    try:
        return sd.load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


def _weights(args, cfg: cf.RunConfig):
    if getattr(args, "oracle", False):
        return None
    if args.weights:
        try:
            return mt.MatcherWeights.load(args.weights, expect=cfg.matcher())
        except OSError as exc:
            raise UsageError(f"cannot read weights {args.weights}: {exc}") from exc
    return mt.MatcherWeights.init(cfg.matcher(), cfg.seed)


def _source(args) -> str:
    if getattr(args, "oracle", False):
        return "oracle"
    return args.weights or "init(seed)"


def _tuple_matches(sample, weights, cfg: cf.RunConfig) -> mt.MatchSet:
    if weights is None:
        return mv.oracle_matches(sample)
    return mt.match_tuple([f.keypoints for f in sample.frames], weights, cfg.mode, cfg.conf_threshold)


def _pose_dict(p) -> dict:
    return {"R": np.asarray(p.R).ravel().tolist(), "t": np.asarray(p.t).ravel().tolist()}


# -- per-tuple workers (module level so they pickle) -----------------------------

def _match_job(args):
    index, sample, weights, cfg = args
    ms = _tuple_matches(sample, weights, cfg)
    return {"tuple": index, "matches": [list(e) for e in ms.entries()]}


def _pose_job(args):
    index, sample, weights, cfg = args
    ms = _tuple_matches(sample, weights, cfg)
    pairs, failed = [], False
    for a, b in sample.pairs:
        pm = ms.pairs.get((a, b))
        row = {"pair": [a, b], "matches": 0 if pm is None else len(pm)}
        try:
            if pm is None or len(pm) < 8:
                raise DegenerateConfigurationError(f"{row['matches']} matches (< 8)")
            fa, fb = sample.frames[a], sample.frames[b]
            pose = mv.two_view_pose(fa.keypoints.coords[pm.idx_a], fb.keypoints.coords[pm.idx_b], pm.weights,
                                    fa.intrinsics, fb.intrinsics, cfg.solver, cfg.ba_iters, cfg.beta0)
            err = geo.pose_error(pose, sample.relative_gt(a, b))
            row.update(pose=_pose_dict(pose.pose), rotation_deg=err.rotation_deg,
                       translation_deg=err.translation_deg if err.translation_defined else mv.FAIL_DEG)
        except MvMatchError as exc:
            failed = True
            row.update(error=f"{type(exc).__name__}: {exc}", rotation_deg=mv.FAIL_DEG, translation_deg=mv.FAIL_DEG)
        pairs.append(row)
    return {"tuple": index, "pairs": pairs}, failed


def _multiview_job(args):
    index, sample, weights, cfg = args
    ms = _tuple_matches(sample, weights, cfg)
    try:
        graph = mv.multiview_poses(sample.frames, ms, cfg.solver, cfg.ba_iters, beta0=cfg.beta0)
    except MvMatchError as exc:
        return {"tuple": index, "error": f"{type(exc).__name__}: {exc}"}, True
    rows = mv._pair_errors(sample, graph.absolute)
    return {
        "tuple": index,
        "absolute": [_pose_dict(p) for p in graph.absolute],
        "edges": [list(k) for k in sorted(graph.edges)],
        "tree": [list(k) for k in graph.tree],
        "rotation_converged": graph.rotation_converged,
        "pairs": [{"pair": [a, b], "rotation_deg": r, "translation_deg": t} for a, b, r, t in rows],
    }, False


def _map(fn, items, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- commands ------------------------------------------------------------------

def cmd_gen(args, cfg: cf.RunConfig) -> int:
    if args.tuples < 1:
        raise ConfigError("--tuples must be positive")
    ds = sd.generate_dataset(cfg.scene(), args.tuples, cfg.seed, cfg.noise_px, cfg.desc_noise, cfg.outliers,
                             tuple(cfg.label_thresholds), jobs=args.jobs)
    ds.config["run_config"] = cfg.to_dict()
    text = json.dumps(sd.dataset_to_dict(ds))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


def cmd_match(args, cfg: cf.RunConfig) -> int:
    ds = _load_dataset(args.data)
    weights = _weights(args, cfg)
    items = [(k, s, weights, cfg) for k, s in enumerate(ds.tuples)]
    results = _map(_match_job, items, args.jobs)
    _emit({"run_config": cfg.to_dict(), "weights": _source(args),
           "columns": ["image_a", "i", "image_b", "j", "confidence", "score"], "tuples": results}, args.out)
    return EXIT_OK


def cmd_pose(args, cfg: cf.RunConfig) -> int:
    ds = _load_dataset(args.data)
    weights = _weights(args, cfg)
    items = [(k, s, weights, cfg) for k, s in enumerate(ds.tuples)]
    results = _map(_pose_job, items, args.jobs)
    tuples = [r for r, _ in results]
    errors = [max(p["rotation_deg"], p["translation_deg"]) for t in tuples for p in t["pairs"]]
    failed = [t["tuple"] for t, bad in results if bad]
    _emit({"run_config": cfg.to_dict(), "weights": _source(args), "tuples": tuples, "failed_tuples": failed,
           "auc": dict(zip([str(x) for x in cfg.auc_thresholds], mv.auc(errors, cfg.auc_thresholds)))}, args.out)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_multiview(args, cfg: cf.RunConfig) -> int:
    ds = _load_dataset(args.data)
    weights = _weights(args, cfg)
    items = [(k, s, weights, cfg) for k, s in enumerate(ds.tuples)]
    results = _map(_multiview_job, items, args.jobs)
    tuples = [r for r, _ in results]
    rows = [(t["tuple"], p["pair"][0], p["pair"][1], p["rotation_deg"], p["translation_deg"])
            for t in tuples for p in t.get("pairs", [])]
    for t, bad in results:
        if bad:
            rows.extend((t["tuple"], a, b, mv.FAIL_DEG, mv.FAIL_DEG) for a, b in ds.tuples[t["tuple"]].pairs)
    report = mv.AUCReport.from_errors(rows, cfg.auc_thresholds)
    failed = [t["tuple"] for t, bad in results if bad]
    _emit({"run_config": cfg.to_dict(), "weights": _source(args), "tuples": tuples, "failed_tuples": failed,
           "report": report.to_dict()}, args.out)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_eval(args, cfg: cf.RunConfig) -> int:
    ds = _load_dataset(args.data)
    weights = _weights(args, cfg)
    report = mv.evaluate_tuples(ds, weights, cfg.evaluation(args.oracle), jobs=args.jobs)
    _emit({"run_config": cfg.to_dict(), "weights": _source(args), "report": report.to_dict()}, args.out)
    return EXIT_OK


def cmd_train(args, cfg: cf.RunConfig) -> int:
    if not args.out:
        raise UsageError("train needs --out for the weights file")
    ds = _load_dataset(args.data)
    if not 0 <= args.val < len(ds):
        raise ConfigError(f"--val must be in [0, {len(ds)})")
    train, val = ds.split(len(ds) - args.val)
    init = None
    if args.init:
        init = mt.MatcherWeights.load(args.init, expect=cfg.matcher())
    stages = (1, 2) if args.stage == "both" else (int(args.stage),)
    result = tr.train_toy(train, cfg.train(), cfg.seed, val if args.val else None, init, stages)
    result.weights.save(args.out)
    if args.log:
        lines = [{"run_config": cfg.to_dict(), "stages": list(stages), "init": args.init}] + result.records
        Path(args.log).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))
    s = result.stats
    log.info("trained %s: %d pose terms, %d skipped, %d saturated logs", stages, s.pose_terms, s.pose_skipped,
             s.saturated)
    return EXIT_OK


def cmd_gradcheck(args, cfg: cf.RunConfig) -> int:
    results = gc.run_all(cfg.seed, args.eps)
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'error':>10}  {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:10.3e}  {r.tolerance:9.0e}  {'pass' if r.ok else 'FAIL'}")
    print("\n".join(lines), file=sys.stderr)
    for r in results:
        log.debug("%s took %.2f s", r.name, r.seconds)
    _emit({"run_config": cfg.to_dict(), "eps": args.eps,
           "checks": [{"name": r.name, "error": r.error, "tolerance": r.tolerance, "ok": r.ok} for r in results]},
          args.out)
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


COMMANDS = {"gen": cmd_gen, "match": cmd_match, "pose": cmd_pose, "multiview": cmd_multiview,
            "eval": cmd_eval, "train": cmd_train, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = cf.resolve(None, args.config, args.set, _flags(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
