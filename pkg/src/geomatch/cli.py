"""Command-line entry point: ``geomatch {gen,train,match,register,eval,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .core import DegenerateGeometryError, EvalConfig, SynthParams, gt_correspondences, synth_pair
from .pipeline import ABLATIONS, AblationConfig, forward, prepare_pair
from .registration import (
    MatchConfig,
    compute_metrics,
    estimate_pose,
    inlier_ratio,
    mutual_top1,
    ransac_pose,
    sinkhorn_baseline,
    top_k_select,
)
from .train import TrainConfig, make_training_pair, synthetic_stream, train_loop

log = logging.getLogger("geomatch")

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
MATCHERS = ("imatcher", "sinkhorn", "nn")

PRESETS = {
    "synthetic": dict(d=64, k_graph=12, eval=EvalConfig(beta=0.05, inlier_tau=0.05, rre_thresh=5.0, rte_thresh=0.1)),
    "object": dict(d=96, k_graph=12, eval=EvalConfig(beta=0.05, inlier_tau=0.05, rre_thresh=5.0, rte_thresh=0.1)),
    "outdoor": dict(d=256, k_graph=32, eval=EvalConfig(beta=0.6, inlier_tau=0.6, rre_thresh=5.0, rte_thresh=2.0)),
}


@dataclass
class RunConfig:
    preset: str = "synthetic"
    d: int = 64
    k_graph: int = 12
    k_local: int = 8
    match: MatchConfig = field(default_factory=MatchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    weights_path: str | None = None
    output_path: str | None = None

    def __post_init__(self):
        if self.d % 8:
            raise ValueError(f"d={self.d} must be divisible by 8")


class CliError(Exception):
    pass


# dataset ---------------------------------------------------------------------

def pair_seeds(master_seed, count):
    seeds = [int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0]) for i in range(count)]
    if len(set(seeds)) != count:
        raise CliError("seed collision; pick another master seed")
    return seeds


def cmd_gen(params: SynthParams, count, out_dir, force=False):
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seed in enumerate(pair_seeds(params.seed, count)):
        pid = f"pair_{i:04d}"
        X, Y, T = synth_pair(replace(params, seed=seed))
        io.save_cloud(X, out / f"{pid}_src.xyz")
        io.save_cloud(Y, out / f"{pid}_tgt.xyz")
        io.save_transform(T, out / f"{pid}_T.txt")
        entries.append({
            "id": pid, "seed": seed, "source": f"{pid}_src.xyz",
            "target": f"{pid}_tgt.xyz", "transform": f"{pid}_T.txt",
        })
    manifest = {"format_version": MANIFEST_VERSION, "params": asdict(params), "pairs": entries}
    with open(out / MANIFEST, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir):
    root = Path(data_dir)
    try:
        with open(root / MANIFEST) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{root} has no {MANIFEST}") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise CliError(f"{root / MANIFEST}: unsupported manifest version")
    pairs = []
    for entry in manifest["pairs"]:
        X = io.load_cloud(root / entry["source"])
        Y = io.load_cloud(root / entry["target"])
        T = io.load_transform(root / entry["transform"])
        pairs.append((entry["id"], X, Y, T))
    return pairs


# configuration ---------------------------------------------------------------

def build_run_config(args):
    base = dict(PRESETS[args.preset])
    eval_cfg = base.pop("eval")
    overrides = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
    values = {**base, **{k: v for k, v in overrides.items() if k in ("d", "k_graph", "k_local", "seed")}}
    if "eval" in overrides:
        eval_cfg = replace(eval_cfg, **overrides["eval"])
    ablation = AblationConfig(**overrides.get("ablation", {}))
    match = MatchConfig(**overrides.get("match", {}))
    # flags win over the config file
    for key in ("d", "k_graph", "k_local", "seed"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "ablation", None):
        ablation = ABLATIONS[args.ablation]
    if getattr(args, "ransac_iters", None) is not None:
        match = replace(match, ransac_iters=args.ransac_iters)
    if getattr(args, "mode", None):
        match = replace(match, mode=args.mode)
    return RunConfig(
        preset=args.preset,
        match=match,
        eval=eval_cfg,
        ablation=ablation,
        weights_path=getattr(args, "weights", None),
        output_path=getattr(args, "out", None),
        **values,
    )


def _weights_with_meta(run):
    if not run.weights_path:
        raise CliError("--weights is required")
    weights = io.load_weights(run.weights_path)
    meta = io.read_metadata(run.weights_path)
    if weights.d != run.d:
        run = replace(run, d=weights.d)
    if "ablation" in meta:
        run = replace(run, ablation=AblationConfig(**meta["ablation"]))
    for key in ("k_graph", "k_local"):
        if key in meta:
            run = replace(run, **{key: meta[key]})
    return weights, run


# train -----------------------------------------------------------------------

def cmd_train(run: RunConfig, tcfg: TrainConfig, data_dir=None, synth: SynthParams | None = None,
              loss_csv=None, checkpoint_every=500):
    """Train on a dataset directory (cycled) or on an endless synthetic stream."""
    if data_dir is not None:
        prepared = [make_training_pair(X, Y, T, run.eval.beta, run.k_local) for _, X, Y, T in load_dataset(data_dir)]
        if not prepared:
            raise CliError("dataset is empty")

        def stream():
            while True:
                yield from prepared

        pairs = stream()
    else:
        pairs = synthetic_stream(synth or SynthParams(seed=run.seed), run.eval.beta, run.k_local)

    meta = {"d": run.d, "k_graph": run.k_graph, "k_local": run.k_local, "ablation": asdict(run.ablation),
            "preset": run.preset}
    def ckpt(step, w):
        io.save_weights(w, run.output_path, {**meta, "step": step})

    rows = []
    weights, losses = train_loop(
        tcfg, pairs, run.d, run.k_graph, run.ablation,
        on_step=lambda step, loss, lr: rows.append((step, loss, lr)),
        checkpoint=ckpt if run.output_path else None, checkpoint_every=checkpoint_every,
    )
    if run.output_path:
        io.save_weights(weights, run.output_path, {**meta, "step": tcfg.steps})
    if loss_csv:
        with open(loss_csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in rows:
                writer.writerow([step, f"{loss:.8f}", f"{lr:.8e}"])
    return weights, losses


# match / register ------------------------------------------------------------

def _descriptor_nn_scores(pair):
    dx, dy = pair.desc_x, pair.desc_y
    both = np.concatenate([dx, dy])
    mu, sd = both.mean(0), both.std(0) + 1e-12
    dx, dy = (dx - mu) / sd, (dy - mu) / sd
    sq = (dx * dx).sum(1)[:, None] + (dy * dy).sum(1)[None, :] - 2 * dx @ dy.T
    # positive and monotone in similarity, so the scores double as pose weights
    return 1.0 / (1.0 + np.maximum(sq, 0.0))


def score_pair(weights, run, X, Y, matcher="imatcher", sinkhorn_iters=100):
    """Score matrix for one pair plus the forward record (None for weight-free matchers)."""
    pair = prepare_pair(X, Y, run.k_local)
    if matcher == "nn":
        return _descriptor_nn_scores(pair), None
    if weights is None:
        raise CliError(f"matcher {matcher!r} needs --weights")
    out = forward(weights, pair, run.ablation, run.k_graph)
    if matcher == "sinkhorn":
        return sinkhorn_baseline(out.s_hat.data.astype(np.float64), sinkhorn_iters), out
    return out.scores.data.astype(np.float64), out


def select(S, match: MatchConfig, k=None):
    if k is not None:
        return top_k_select(S, min(k, S.size))
    if match.mode == "top_k":
        return top_k_select(S, min(match.k, S.size))
    return mutual_top1(S)


def cmd_match(run, X, Y, out_csv=None, matcher="imatcher"):
    weights = None
    if matcher != "nn":
        weights, run = _weights_with_meta(run)
    S, out = score_pair(weights, run, X, Y, matcher)
    corr = select(S, run.match)
    summary = {
        "num_corr": len(corr),
        "row_sum_max": float(S.sum(1).max()),
        "col_sum_max": float(S.sum(0).max()),
        "entry_min": float(S.min()),
        "entry_max": float(S.max()),
        "match_source": out.match_source if out is not None else "none",
    }
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "score"])
            for i, j, s in zip(corr.src, corr.tgt, corr.weights):
                writer.writerow([int(i), int(j), f"{s:.9g}"])
    return corr, summary


def solve_pose(corr, X, Y, run, use_ransac):
    if use_ransac:
        return ransac_pose(corr, X, Y, run.match, run.seed).transform
    return estimate_pose(corr, X, Y)


# eval / ablate ---------------------------------------------------------------

def evaluate_pair(pid, X, Y, T, weights, run, matcher, use_ransac, budgets, timing):
    start = time.perf_counter()
    S, _ = score_pair(weights, run, X, Y, matcher)
    corr = select(S, run.match)
    failed = False
    try:
        T_est = solve_pose(corr, X, Y, run, use_ransac)
    except DegenerateGeometryError as exc:
        log.warning("%s: %s", pid, exc)
        T_est = None
    if T_est is None:
        failed = True
    elapsed = time.perf_counter() - start
    m = compute_metrics(T_est, T, corr, X, Y, run.eval)
    gt, _ = gt_correspondences(X, Y, T, run.eval.beta)
    row = {
        "pair_id": pid, "rre_deg": m.rre, "rte": m.rte, "rr": m.rr, "ir": m.ir,
        "fmr_flag": m.fmr, "overlap": len(gt) / min(len(X), len(Y)), "num_corr": m.num_corr,
        "runtime_s": elapsed if timing else float("nan"), "failed": failed,
    }
    budget_rows = []
    for k in budgets:
        c = select(S, run.match, k)
        budget_rows.append({"pair_id": pid, "budget": k, "num_corr": len(c),
                            "ir": inlier_ratio(c, X, Y, T, run.eval.inlier_tau)})
    return row, budget_rows


def aggregate(rows):
    def mean(key):
        vals = [float(r[key]) for r in rows if np.isfinite(float(r[key]))]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "pair_id": "mean", "rre_deg": mean("rre_deg"), "rte": mean("rte"),
        "rr": float(np.mean([r["rr"] for r in rows])) if rows else 0.0,
        "ir": mean("ir"), "fmr_flag": float(np.mean([r["fmr_flag"] for r in rows])) if rows else 0.0,
        "overlap": mean("overlap"), "num_corr": mean("num_corr"), "runtime_s": mean("runtime_s"),
        "failed": int(sum(r["failed"] for r in rows)),
    }


EVAL_COLUMNS = io.REPORT_COLUMNS + ("failed",)


def cmd_eval(run, data_dir, matcher="imatcher", use_ransac=False, budgets=(), jobs=1, timing=False, weights=None):
    if matcher not in MATCHERS:
        raise CliError(f"unknown matcher {matcher!r}")
    if matcher != "nn" and weights is None:
        weights, run = _weights_with_meta(run)
    pairs = load_dataset(data_dir)

    def work(item):
        pid, X, Y, T = item
        return evaluate_pair(pid, X, Y, T, weights, run, matcher, use_ransac, budgets, timing)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]
    rows = [r for r, _ in results]
    budget_rows = [b for _, bs in results for b in bs]
    summary = aggregate(rows)
    if run.output_path:
        io.write_report(rows + [summary], run.output_path, EVAL_COLUMNS)
        if budgets:
            io.write_report(budget_rows, _sibling(run.output_path, "_ir_budget"), ("pair_id", "budget", "num_corr", "ir"))
    return rows, summary, budget_rows


def _sibling(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix + p.suffix)


ABLATION_COLUMNS = ("config", "gcnn", "bi_match", "global_consistency", "reposition", "ir", "overlap",
                    "rr", "rre_deg", "rte", "fmr", "match_source")


def cmd_ablate(run, tcfg, data_dir, train_dir=None, synth=None, weights_dir=None):
    """Train and evaluate configurations (a)-(e); one aggregate row each, in order."""
    rows = []
    pairs = load_dataset(data_dir)
    for name, ablation in ABLATIONS.items():
        cfg_run = replace(run, ablation=ablation, output_path=None)
        if weights_dir:
            cfg_run = replace(cfg_run, output_path=str(Path(weights_dir) / f"weights_{name}.json"))
        weights, _ = cmd_train(cfg_run, tcfg, train_dir, synth)
        cfg_run = replace(cfg_run, output_path=None)
        results, sources = [], set()
        for pid, X, Y, T in pairs:
            S, out = score_pair(weights, cfg_run, X, Y)
            sources.add(out.match_source)
            results.append(evaluate_pair(pid, X, Y, T, weights, cfg_run, "imatcher", False, (), False)[0])
        agg = aggregate(results)
        rows.append({
            "config": name, **{k: int(v) for k, v in asdict(ablation).items()},
            "ir": agg["ir"], "overlap": agg["overlap"], "rr": agg["rr"], "rre_deg": agg["rre_deg"],
            "rte": agg["rte"], "fmr": agg["fmr_flag"], "match_source": "+".join(sorted(sources)),
        })
    if run.output_path:
        io.write_report(rows, run.output_path, ABLATION_COLUMNS)
    return rows


# argument parsing ------------------------------------------------------------

def _add_common(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="synthetic")
    p.add_argument("--config", help="JSON run configuration; flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k-graph", dest="k_graph", type=int)
    p.add_argument("--k-local", dest="k_local", type=int)


def _add_synth(p):
    p.add_argument("--num-points", type=int, default=256)
    p.add_argument("--overlap", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--rot-max", type=float, default=45.0)
    p.add_argument("--trans-max", type=float, default=0.5)
    p.add_argument("--shape", default="sphere")


def _synth_from(args, seed):
    return SynthParams(args.num_points, args.overlap, args.noise, args.rot_max, args.trans_max, seed, args.shape)


def _add_train(p):
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--f64", action="store_true", help="train in float64")
    p.add_argument("--no-gt-warp", dest="gt_warp", action="store_false")


def _train_cfg(args, seed):
    return TrainConfig(steps=args.steps, lr=args.lr, seed=seed, batch=args.batch,
                       precision="f64" if args.f64 else "f32", gt_warp=args.gt_warp)


def build_parser():
    parser = argparse.ArgumentParser(prog="geomatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic pairs and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    _add_synth(p)

    p = sub.add_parser("train", help="fit the matcher weights")
    _add_common(p)
    _add_train(p)
    _add_synth(p)
    p.add_argument("--data", help="dataset directory; omit to train on a synthetic stream")
    p.add_argument("--out", required=True, help="weights file")
    p.add_argument("--loss-csv")
    p.add_argument("--ablation", choices=sorted(ABLATIONS))

    for name, helptext in (("match", "score one pair and emit correspondences"),
                           ("register", "match one pair and estimate its pose")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("source")
        p.add_argument("target")
        p.add_argument("--weights")
        p.add_argument("--matcher", choices=MATCHERS, default="imatcher")
        p.add_argument("--mode", choices=("mutual_top1", "top_k"))
        p.add_argument("--out", help="correspondence CSV (match) or 4x4 transform (register)")
        if name == "register":
            p.add_argument("--ransac", action="store_true")
            p.add_argument("--ransac-iters", type=int)

    p = sub.add_parser("eval", help="evaluate a dataset and write a metrics CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights")
    p.add_argument("--matcher", choices=MATCHERS, default="imatcher")
    p.add_argument("--mode", choices=("mutual_top1", "top_k"))
    p.add_argument("--num-corr", default="", help="comma separated correspondence budgets")
    p.add_argument("--ransac", action="store_true")
    p.add_argument("--ransac-iters", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="record wall-clock runtime per pair")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and evaluate configurations (a)-(e)")
    _add_common(p)
    _add_train(p)
    _add_synth(p)
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--train-data", help="training dataset; omit for a synthetic stream")
    p.add_argument("--weights-dir")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (CliError, ValueError, KeyError, OSError, ad.NumericError) as exc:
        print(f"geomatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    if args.command == "gen":
        manifest = cmd_gen(_synth_from(args, args.seed), args.pairs, args.out, args.force)
        print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")
        return 0

    run = build_run_config(args)
    if args.command == "train":
        _, losses = cmd_train(run, _train_cfg(args, run.seed), args.data, _synth_from(args, run.seed),
                              args.loss_csv)
        print(f"trained {len(losses)} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        return 0

    if args.command in ("match", "register"):
        X, Y = io.load_cloud(args.source), io.load_cloud(args.target)
        out_csv = args.out if args.command == "match" else None
        corr, summary = cmd_match(run, X, Y, out_csv, args.matcher)
        if args.command == "match":
            print(json.dumps(summary, sort_keys=True))
            return 0
        T = solve_pose(corr, X, Y, run, args.ransac)
        if T is None:
            # a failed pair is a result, not an error
            print("registration failed: no consensus model")
            return 0
        if args.out:
            io.save_transform(T, args.out)
        print("\n".join(" ".join(f"{v: .9f}" for v in row) for row in T.as_matrix()))
        return 0

    if args.command == "eval":
        budgets = tuple(int(b) for b in args.num_corr.split(",") if b.strip())
        _, summary, _ = cmd_eval(run, args.data, args.matcher, args.ransac, budgets, args.jobs, args.timing)
        print(json.dumps({k: summary[k] for k in ("ir", "rr", "rre_deg", "rte", "fmr_flag")}, sort_keys=True))
        return 0

    if args.command == "ablate":
        rows = cmd_ablate(run, _train_cfg(args, run.seed), args.data, args.train_data,
                          _synth_from(args, run.seed), args.weights_dir)
        for r in rows:
            print(f"({r['config']}) ir={r['ir']:.4f} rr={r['rr']:.3f} match={r['match_source']}")
        return 0
    raise CliError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
