"""Command-line entry point.

Exit codes: 0 success, 1 input or configuration error, 2 numeric or domain
error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .core import (
    SOURCE_LABELED,
    TARGET_EVAL,
    TARGET_UNLABELED,
    InputError,
    StFusionError,
    read_observations,
    write_observations,
)
from .embedder import TrainConfig, init_model, read_model, train_supervised, write_model
from .evaluation import default_grid, fusion_cmc, theorem1_harness, visual_cmc
from .fusion import FusionParams, dataset_fusion_scores, rank_rows
from .pipeline import PipelineConfig, StageError, run_pipeline
from .rankopt import ORIENTATIONS, LoopConfig, mutual_promote
from .scenarios import SCENARIOS, get_scenario
from .simulator import ground_truth_pattern, load_sim_config, simulate
from .stpattern import BinSpec, correct_pattern, count_patterns, read_histogram, write_histogram, write_plot_data

log = logging.getLogger("stfusion")

HIST_KINDS = ("pos", "neg", "marginal")


def _write_jsonl(records, path: Optional[str]) -> None:
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path is None or path == "-":
        sys.stdout.write(lines)
    else:
        Path(path).write_text(lines, encoding="utf-8")


def _float(x):
    return None if x is None else float(x)


def _bins_from_args(args, default: Optional[BinSpec] = None) -> BinSpec:
    base = (default or BinSpec()).to_dict()
    for key in ("width", "delta_min", "delta_max", "window", "eps"):
        v = getattr(args, key if key != "width" else "bin_width", None)
        if v is not None:
            base[key] = v
    return BinSpec.from_dict(base)


def _add_bin_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("binning")
    g.add_argument("--bin-width", type=int)
    g.add_argument("--delta-min", type=int)
    g.add_argument("--delta-max", type=int)
    g.add_argument("--window", type=int, help="half-width t of the lookup window, in frames")
    g.add_argument("--eps", type=float, help="additive smoothing per bin")


def _hist_paths(prefix: str) -> list:
    return [Path(f"{prefix}.{k}.hist") for k in HIST_KINDS]


def _load_patterns(prefix: str):
    paths = _hist_paths(prefix)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise InputError(f"missing histogram file(s): {', '.join(missing)}")
    return tuple(read_histogram(p) for p in paths)


def _save_patterns(hists, prefix: str) -> None:
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    for h, p in zip(hists, _hist_paths(prefix)):
        write_histogram(h, p)


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.config:
        sim = load_sim_config(args.config)
        bins = BinSpec()
        if args.seed is not None:
            sim = sim.replace(rng_seed=args.seed)
        if args.persons is not None:
            sim = sim.replace(num_persons=args.persons)
    else:
        kw = {} if args.persons is None else {"persons": args.persons}
        sc = get_scenario(args.scenario, args.seed or 0, **kw)
        sim, bins = sc.sim, sc.bins
    ds = simulate(sim, args.split)
    write_observations(ds, args.out)
    log.info("wrote %d observations to %s", len(ds), args.out)
    if args.emit_truth:
        truth = ground_truth_pattern(sim, _bins_from_args(args, bins))
        write_histogram(truth.as_histogram(), args.emit_truth)
    if args.dump_config:
        Path(args.dump_config).write_text(yaml.safe_dump(sim.to_dict(), sort_keys=False), encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    source = read_observations(args.source, split=SOURCE_LABELED)
    if args.model_in:
        model = read_model(args.model_in)
    else:
        model = init_model(args.arch, source.dim, args.embed_dim, args.hidden_dim, tau=args.tau,
                           seed=args.seed, init=args.init)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      pairs_per_epoch=args.pairs_per_epoch, seed=args.seed)
    losses: list = []
    model = train_supervised(model, source, cfg, log=losses)
    write_model(model, args.out)
    if args.loss_log:
        _write_jsonl([{"epoch": i, "loss": v} for i, v in enumerate(losses)], args.loss_log)
    return 0


def cmd_learn_patterns(args) -> int:
    ds = read_observations(args.dataset, split=TARGET_UNLABELED)
    model = read_model(args.model)
    if args.tau is not None:
        from dataclasses import replace

        model = replace(model, tau=args.tau)
    bins = _bins_from_args(args)
    hists = count_patterns(model, ds, bins, args.budget, args.seed, workers=args.threads)
    _save_patterns(hists, args.out)
    if args.correct:
        ep, en = args.correct
        write_histogram(correct_pattern(hists[0], hists[1], ep, en), f"{args.out}.corrected.hist")
    if args.emit_plot_data:
        write_plot_data(hists[0], args.emit_plot_data)
    return 0


def _fusion_params(args, model):
    hp, hn, hm = _load_patterns(args.patterns)
    return FusionParams(args.alpha, args.beta, hp, hn, hm, model)


def cmd_rank(args) -> int:
    gallery = read_observations(args.gallery, split=TARGET_UNLABELED)
    model = read_model(args.model)
    params = _fusion_params(args, model)
    if args.all_queries:
        q = np.arange(len(gallery))
    elif args.query:
        q = np.array([gallery.index_of(x) for x in args.query])
    else:
        raise InputError("give --query ID (repeatable) or --all-queries")
    fused, visual = dataset_fusion_scores(params, gallery, q)
    scores = visual if args.visual_only else fused
    records = []
    for r in rank_rows(scores, gallery, q):
        k = len(r) if args.top is None else min(args.top, len(r))
        records.append({
            "query": r.query_id,
            "classifier": "visual" if args.visual_only else "fusion",
            "gallery": list(r.gallery_ids[:k]),
            "scores": [float(s) for s in r.scores[:k]],
            "tie_break": r.tie_break,
        })
    _write_jsonl(records, args.out)
    return 0


def cmd_promote(args) -> int:
    ds = read_observations(args.dataset, split=TARGET_UNLABELED)
    evalset = read_observations(args.eval, split=TARGET_EVAL) if args.eval else None
    model = read_model(args.model)
    bins = _bins_from_args(args)
    cfg = LoopConfig(
        n=args.n, triplets_per_query=args.triplets_per_query, max_iterations=args.iters, delta=args.delta,
        train=TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
        seed=args.seed, pair_budget=args.budget, queries_per_iteration=args.queries,
        orientation=args.orientation,
    )
    ckdir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    hist_path = Path(args.history) if args.history else None
    if hist_path:
        hist_path.write_text("", encoding="utf-8")

    def hook(m, fp):
        if evalset is None:
            return {}
        return {"rank1_visual": visual_cmc(m, evalset).rank(1), "rank1_fusion": fusion_cmc(fp, evalset).rank(1)}

    def on_iteration(rec, m, fp):
        if ckdir:
            write_model(m, ckdir / f"model_iter{rec.iteration}.ckpt")
        if hist_path:
            with hist_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    final, params, _ = mutual_promote(model, ds, bins, args.alpha, args.beta, cfg, eval_hook=hook,
                                      workers=args.threads, on_iteration=on_iteration)
    write_model(final, args.out)
    if params is not None and args.patterns_out:
        _save_patterns((params.hist_pos, params.hist_neg, params.hist_marginal), args.patterns_out)
    return 0


def cmd_eval(args) -> int:
    ds = read_observations(args.dataset, split=TARGET_EVAL)
    model = read_model(args.model)
    records = []
    curve = visual_cmc(model, ds, args.max_rank)
    for k in range(1, len(curve.accuracy) + 1):
        records.append({"kind": "cmc", "classifier": "visual", "rank": k, "accuracy": curve.rank(k)})
    if args.patterns:
        fp = _fusion_params(args, model)
        curve = fusion_cmc(fp, ds, args.max_rank)
        for k in range(1, len(curve.accuracy) + 1):
            records.append({"kind": "cmc", "classifier": "fusion", "alpha": args.alpha, "beta": args.beta,
                            "rank": k, "accuracy": curve.rank(k)})
    if args.error_sums:
        grid = default_grid()
        rep = theorem1_harness(ds, model, _bins_from_args(args), grid, args.budget, args.pair_budget, args.seed)
        for p in rep.points:
            records.append({"kind": "error-sums", **{k: _float(v) if isinstance(v, (float, np.floating)) else v
                                                    for k, v in p.items()}})
        records.append({"kind": "error-sums-summary", **rep.summary()})
    _write_jsonl(records, args.out)
    return 0


def cmd_sweep(args) -> int:
    ds = read_observations(args.dataset, split=TARGET_EVAL)
    model = read_model(args.model)
    if args.patterns:
        hp, hn, hm = _load_patterns(args.patterns)
    else:
        source = read_observations(args.patterns_from or args.dataset, split=TARGET_UNLABELED)
        hp, hn, hm = count_patterns(model, source, _bins_from_args(args), args.budget, args.seed,
                                    workers=args.threads)
    records = [{"alpha": None, "beta": None, "classifier": "visual", "rank1": visual_cmc(model, ds).rank(1)}]
    for a in args.alphas:
        for b in args.betas:
            if a + b >= 1:
                continue
            fp = FusionParams(a, b, hp, hn, hm, model)
            records.append({"alpha": a, "beta": b, "classifier": "fusion", "rank1": fusion_cmc(fp, ds).rank(1)})
    _write_jsonl(records, args.out)
    return 0


def cmd_pipeline(args) -> int:
    overrides = list(args.set or [])
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.out_dir is not None:
        overrides.append(f"output_dir={args.out_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = PipelineConfig.load(args.config, overrides)
    report = run_pipeline(cfg)
    summary = {k: report["stages"][k] for k in report["stages"] if k != "promote"}
    if "promote" in report["stages"]:
        summary["promote"] = {k: v for k, v in report["stages"]["promote"].items() if k != "history"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic camera-network dataset")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="YAML simulator config")
    src.add_argument("--scenario", choices=sorted(SCENARIOS))
    s.add_argument("--seed", type=int)
    s.add_argument("--persons", type=int)
    s.add_argument("--split", default=TARGET_EVAL, choices=(SOURCE_LABELED, TARGET_UNLABELED, TARGET_EVAL))
    s.add_argument("--out", required=True)
    s.add_argument("--emit-truth", metavar="PATH", help="also write the exact same-identity pattern")
    s.add_argument("--dump-config", metavar="PATH", help="write the effective simulator config as YAML")
    _add_bin_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="supervised training on a labeled source dataset")
    s.add_argument("--source", required=True)
    s.add_argument("--model-in")
    s.add_argument("--arch", default="linear", choices=("identity", "linear", "mlp"))
    s.add_argument("--embed-dim", type=int)
    s.add_argument("--hidden-dim", type=int, default=0)
    s.add_argument("--tau", type=float, default=0.6)
    s.add_argument("--init", default="identity", choices=("identity", "random"))
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--pairs-per-epoch", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loss-log", metavar="PATH")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("learn-patterns", help="count spatio-temporal patterns on an unlabeled dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--tau", type=float, help="override the checkpoint's visual threshold")
    s.add_argument("--budget", type=int, help="number of sampled ordered pairs (default: all)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--correct", nargs=2, type=float, metavar=("EP", "EN"),
                   help="also write the error-corrected judged-same histogram")
    s.add_argument("--emit-plot-data", metavar="PATH")
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.{pos,neg,marginal}.hist")
    _add_bin_flags(s)
    s.set_defaults(func=cmd_learn_patterns)

    s = sub.add_parser("rank", help="rank a gallery for one or more queries")
    s.add_argument("--gallery", required=True)
    s.add_argument("--query", action="append")
    s.add_argument("--all-queries", action="store_true")
    s.add_argument("--model", required=True)
    s.add_argument("--patterns", required=True, help="histogram prefix")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--top", type=int)
    s.add_argument("--visual-only", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("promote", help="learning-to-rank mutual promotion")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eval", help="labeled dataset for per-iteration rank-1 (read only by the hook)")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--triplets-per-query", type=int, default=2)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--delta", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--queries", type=int, help="queries sampled per iteration (default: all)")
    s.add_argument("--orientation", default="verbatim", choices=ORIENTATIONS)
    s.add_argument("--budget", type=int)
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--history", metavar="PATH")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--patterns-out", metavar="PREFIX")
    _add_bin_flags(s)
    s.set_defaults(func=cmd_promote)

    s = sub.add_parser("eval", help="CMC tables and error-sum reports on a labeled dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--patterns", help="histogram prefix for the fused classifier")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--max-rank", type=int, default=20)
    s.add_argument("--error-sums", action="store_true",
                   help="compare visual and fused error-rate sums over an (alpha, beta, tau) grid")
    s.add_argument("--budget", type=int)
    s.add_argument("--pair-budget", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    _add_bin_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="rank-1 over an (alpha, beta) grid")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--patterns", help="histogram prefix")
    g.add_argument("--patterns-from", help="unlabeled dataset to learn patterns from")
    s.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.25, 0.5])
    s.add_argument("--betas", type=float, nargs="+", default=[0.0, 0.25, 0.5])
    s.add_argument("--budget", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    _add_bin_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("pipeline", help="run all four stages from a config file")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    s.add_argument("--threads", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except StFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
