"""Command-line entry point: ``zsar <subcommand> ...``.

Exit codes: 0 success, 1 validation/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import align, textproc
from .align import LossSettings, NonFiniteError
from .datamodel import (
    ActionClass,
    FeatureStore,
    FormatError,
    RunConfig,
    atomic_write_text,
    config_types,
    kv_text,
    load_classes,
    load_embedding_table,
    load_feature_store,
    load_run_config,
    load_split,
    parse_kv,
    save_classes,
    save_feature_store,
    save_split,
)
from .evaluate import (
    AblationRow,
    evaluate_problem,
    metrics_json,
    metrics_table,
    parse_variant,
    run_ablation,
    sweep_variants,
)
from .gradcheck import run_suite
from .optim import load_checkpoint, save_checkpoint, train
from .problem import build_problem, concat_text
from .stopwords import DEFAULT_STOPWORDS, load_stopwords
from .synthbench import SynthSpec, generate, parse_synth_spec, write_dataset

log = logging.getLogger("zsar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _overrides(pairs, types) -> dict:
    text = "\n".join(pairs or [])
    return parse_kv(text, types, "--set")


def effective_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    changes = _overrides(args.set, config_types(RunConfig))
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


@contextmanager
def staged_dir(target, overwrite: bool = False):
    """Yield a temp dir that is renamed to ``target`` only if the block succeeds."""
    target = Path(target)
    if target.exists() and any(target.iterdir()) and not overwrite:
        raise FormatError(f"output directory {target} exists and is not empty (use --overwrite)")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}.tmp-"))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def read_classes(path) -> list[ActionClass]:
    """Class metadata (.jsonl) or a plain list of action names, one per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"classes file not found: {path}")
    if path.suffix == ".jsonl":
        return load_classes(path)
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [ActionClass.create(i, name) for i, name in enumerate(names)]


def _data_paths(data_dir):
    data = Path(data_dir)
    if not data.is_dir():
        raise FileNotFoundError(f"data directory not found: {data}")
    return data / "videos.zsf", data / "definitions.zsf", data / "descriptions.zsf"


def load_problem(data_dir, split_path, k: int, rankings_dir=None):
    vids, defs, descs = _data_paths(data_dir)
    videos = load_feature_store(vids)
    definitions = load_feature_store(defs) if defs.exists() else None
    descriptions = load_feature_store(descs) if descs.exists() else None
    split = load_split(split_path, videos)
    selection = None
    if rankings_dir:
        selection = {
            cid: textproc.select_top_k(r, k) for cid, r in textproc.load_rankings(rankings_dir).items()
        }
    return build_problem(videos, split, definitions, descriptions, k, selection)


def _split_path(args):
    return args.split or str(Path(args.data) / "split.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_dedup(args) -> int:
    classes = read_classes(args.classes)
    kept = textproc.dedup_actions(classes)
    if args.out:
        out = Path(args.out)
        save_classes(kept, out)
        atomic_write_text(out.with_name(out.name + ".cfg"), kv_text(effective_config(args)))
    for c in kept:
        print(f"{c.class_id}\t{c.canonical_name}")
    print(f"{len(classes)} actions -> {len(kept)} canonical actions", file=sys.stderr)
    return 0


def cmd_rank(args) -> int:
    classes = read_classes(args.classes)
    table = load_embedding_table(args.embeddings)
    stop = None
    if args.remove_stopwords:
        stop = load_stopwords(args.stopwords) if args.stopwords else DEFAULT_STOPWORDS
    with staged_dir(args.out, args.overwrite) as tmp:
        for c in sorted(classes, key=lambda c: c.class_id):
            ranking = textproc.rank_descriptions(c, table, stop)
            textproc.save_ranking(ranking, tmp / f"{c.class_id}.rank")
        atomic_write_text(tmp / "config.cfg", kv_text(effective_config(args)))
    print(f"wrote rankings for {len(classes)} classes to {args.out}")
    return 0


def cmd_stats(args) -> int:
    stats = textproc.corpus_stats(read_classes(args.classes), args.top, args.bottom)
    doc = stats.as_dict()
    if args.out:
        atomic_write_text(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"classes: {len(stats.per_class)}")
    print(f"descriptions: {stats.total_descriptions}")
    print(f"sentences: {stats.total_sentences}")
    print(f"sentences per description: {stats.sentences_per_description:.2f}")
    print("descriptions per action:")
    for label, count in stats.description_histogram:
        print(f"  {label:>12}  {count}")
    return 0


def cmd_gen(args) -> int:
    spec = parse_synth_spec(Path(args.config).read_text(encoding="utf-8"), args.config) \
        if args.config else SynthSpec()
    changes = _overrides(args.set, config_types(SynthSpec))
    if args.seed is not None:
        changes["seed"] = args.seed
    spec = spec.replace(**changes)
    data = generate(spec)
    with staged_dir(args.out, args.overwrite) as tmp:
        write_dataset(data, tmp)
    print(f"generated {spec.n_classes} classes, {data.videos.n} videos in {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    split_path = _split_path(args)
    problem = load_problem(args.data, split_path, cfg.k, args.rankings)
    result = train(cfg, problem)
    with staged_dir(args.out, args.overwrite) as tmp:
        meta = {"best_epoch": result.best_epoch, "split_id": problem.split.split_id}
        save_checkpoint(tmp / "checkpoint.zck", result.params, result.adam, result.rng_state, meta)
        lines = [json.dumps(r.as_dict(), sort_keys=True) for r in result.history]
        atomic_write_text(tmp / "metrics.jsonl", "".join(f"{ln}\n" for ln in lines))
        atomic_write_text(tmp / "config.cfg", kv_text(cfg))
        save_split(problem.split, tmp / "split.json")
        if args.rankings:
            atomic_write_text(tmp / "rankings.path", str(Path(args.rankings).resolve()) + "\n")
    last = result.history[-1] if result.history else None
    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch}; "
        f"final loss {last.mean_loss:.6f}" if last else "trained 0 epochs"
    )
    return 0


def _run_problem(args, run_dir, k):
    run = Path(run_dir)
    if not (run / "checkpoint.zck").exists():
        raise FileNotFoundError(f"no checkpoint in run directory {run}")
    run_cfg = load_run_config(run / "config.cfg")
    rankings = None
    if (run / "rankings.path").exists():
        rankings = (run / "rankings.path").read_text(encoding="utf-8").strip()
    problem = load_problem(args.data, run / "split.json", k or run_cfg.k, rankings)
    params, _, _, _ = load_checkpoint(run / "checkpoint.zck")
    return run_cfg, problem, params


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    rows = []
    for run_dir in args.run:
        run_cfg, problem, params = _run_problem(args, run_dir, None)
        metrics = evaluate_problem(params, problem, LossSettings.from_config(run_cfg))
        rows.append(AblationRow("model", problem.split.split_id, metrics))
    table = metrics_table(rows, args.ddof)
    with staged_dir(args.out, args.overwrite) as tmp:
        atomic_write_text(tmp / "metrics.tsv", table)
        atomic_write_text(tmp / "metrics.json", metrics_json(rows, args.ddof))
        atomic_write_text(tmp / "config.cfg", kv_text(cfg))
    sys.stdout.write(table)
    return 0


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    names = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else []
    variants = [parse_variant(n, cfg) for n in names]
    variants += sweep_variants(cfg, _floats(args.alpha_sweep), _ints(args.k_sweep))
    if not variants:
        raise UsageError("ablate: nothing to run; give --variants and/or a sweep")
    splits = args.split or [str(Path(args.data) / "split.json")]

    def make_problems(k):
        return [load_problem(args.data, s, k, args.rankings) for s in splits]

    rows = run_ablation(cfg, variants, make_problems)
    table = metrics_table(rows, args.ddof)
    with staged_dir(args.out, args.overwrite) as tmp:
        atomic_write_text(tmp / "metrics.tsv", table)
        atomic_write_text(tmp / "metrics.json", metrics_json(rows, args.ddof))
        atomic_write_text(tmp / "config.cfg", kv_text(cfg))
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cfg = effective_config(args)
    settings = LossSettings.from_config(cfg)
    worst = run_suite(seed, args.instances, args.h, settings)
    ok = True
    for name, err in worst.items():
        flag = "ok" if err <= args.tol else "FAIL"
        ok &= err <= args.tol
        print(f"{name}\tmax_rel_err={err:.3e}\t{flag}")
    return 0 if ok else 1


def cmd_export(args) -> int:
    cfg = effective_config(args)
    run_cfg, problem, params = _run_problem(args, args.run, None)
    vids = _data_paths(args.data)[0]
    videos = load_feature_store(vids)
    settings = LossSettings.from_config(run_cfg)
    V = align.encode_visual(videos.matrix, params)
    text = concat_text(problem.seen, problem.unseen)
    if problem.val_classes is not None:
        text = concat_text(text, problem.val_classes)
    bank = align.class_bank(params, text, settings)
    with staged_dir(args.out, args.overwrite) as tmp:
        save_feature_store(FeatureStore(videos.item_ids, videos.labels, V), tmp / "videos.zsf")
        ids = tuple(f"class{int(c):04d}" for c in bank.class_ids)
        save_feature_store(FeatureStore(ids, bank.class_ids, bank.z), tmp / "classes.zsf")
        atomic_write_text(tmp / "config.cfg", kv_text(cfg))
    print(f"exported {videos.n} video and {len(ids)} class embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="zsar", description="Zero-shot action recognition toolkit.",
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text, out=False, out_required=True):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                       help="override one config key (repeatable)")
        if out:
            p.add_argument("--out", required=out_required, default=None, help="output path")
            p.add_argument("--overwrite", action="store_true", help="replace an existing output")
        p.set_defaults(func=func)
        return p

    p = add("dedup", cmd_dedup, "normalize action names and drop duplicates")
    p.add_argument("--classes", required=True, help="class metadata .jsonl or names .txt")
    p.add_argument("--out", default=None, help="write deduplicated class metadata here")

    p = add("rank", cmd_rank, "rank each class's descriptions by relevance to its name", out=True)
    p.add_argument("--classes", required=True, help="class metadata .jsonl")
    p.add_argument("--embeddings", required=True, help="word2vec text-format embeddings")
    p.add_argument("--remove-stopwords", action="store_true",
                   help="drop stop-words before averaging word vectors")
    p.add_argument("--stopwords", default=None, help="stop-word file (default: built-in list)")

    p = add("stats", cmd_stats, "description and sentence statistics")
    p.add_argument("--classes", required=True, help="class metadata .jsonl")
    p.add_argument("--top", type=int, default=40, help="actions listed with most descriptions")
    p.add_argument("--bottom", type=int, default=20, help="actions listed with fewest descriptions")
    p.add_argument("--out", default=None, help="write statistics as JSON here")

    add("gen", cmd_gen, "generate a synthetic benchmark (config: synthetic spec)", out=True)

    p = add("train", cmd_train, "train the alignment model on one split", out=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default=None, help="split file (default: DATA/split.json)")
    p.add_argument("--rankings", default=None, help="directory of .rank files for top-k selection")

    p = add("eval", cmd_eval, "zero-shot top-1/top-5 over one or more trained runs", out=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p.add_argument("--ddof", type=int, default=0, help="0 = population std, 1 = sample std")

    p = add("ablate", cmd_ablate, "train and evaluate ablation variants", out=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", action="append", default=None, help="split file (repeatable)")
    p.add_argument("--variants", default="AD-only,VC-only,AD+VC,AD+VC+CIM",
                   help="comma list from AD-only, VC-only, AD+VC, each optionally +CIM")
    p.add_argument("--alpha-sweep", default="", help="comma list of fusion ratios")
    p.add_argument("--k-sweep", default="", help="comma list of descriptions per class")
    p.add_argument("--rankings", default=None, help="directory of .rank files")
    p.add_argument("--ddof", type=int, default=0, help="0 = population std, 1 = sample std")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of all analytic gradients")
    p.add_argument("--instances", type=int, default=20, help="number of random instances")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-6, help="max relative error allowed")

    p = add("export-embeddings", cmd_export, "write projected video and class features", out=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="run directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, NonFiniteError, ValueError) as exc:
        print(f"zsar {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
