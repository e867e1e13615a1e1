"""``gcngrasp`` command-line tool.

Exit status: 0 on success, 1 when inputs fail validation, 2 on usage errors.
Every JSON artifact is written with sorted keys and no timestamps, so equal
inputs give byte-identical files. Outputs are written to a temporary path
and moved into place only when the command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .annotation import (
    AnnotationError,
    aggregate,
    filter_annotators,
    kappa_from_votes,
    read_gold,
    read_votes,
    task_agreement_kappa,
)
from .config import ConfigError, RunConfig
from .dataset import DatasetError, Ontology, SyntheticConfig, generate_synthetic, load_dataset, write_dataset
from .evaluation import MODES, EvalReport, dumps, make_splits, map_report, render_table
from .experiments import MODEL_TYPES, SCALE_NOTE, build_model, mean_report, run_crossval
from .knowledge_graph import VARIANTS, build_graph
from .model import load_checkpoint, save_checkpoint
from .training import SampleCache, predict, select_samples, train

log = logging.getLogger("gcngrasp")

# Node / edge totals published for the full TaskGrasp ontology, per graph variant.
PUBLISHED_COUNTS = {"full": (345, 989), "tasks_only": (131, 693), "wordnet_only": (155, 106)}

VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError, DatasetError, ConfigError, AnnotationError)


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _atomic_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_json(path, doc) -> None:
    with _atomic_file(path) as tmp:
        tmp.write_text(dumps(doc), encoding="utf-8")


def _load_config(path) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    log.info("config sha256 %s", cfg.sha256())
    for line in cfg.to_text().splitlines():
        log.info("  %s", line)
    return cfg


# --- commands ------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> None:
    cfg = SyntheticConfig(args.objects, args.classes, args.grasps, args.points)
    log.info("generating %d objects (seed %d)", args.objects, args.seed)
    ds = generate_synthetic(cfg, args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ValueError(f"{out} exists and is not empty")
    tmp = Path(tempfile.mkdtemp(dir=out.parent if out.parent.exists() else None, prefix=".gen-"))
    try:
        write_dataset(ds, tmp)
        if out.exists():
            out.rmdir()
        shutil.move(str(tmp), str(out))
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    print(f"wrote {len(ds.objects)} objects, {sum(len(g) for g in ds.grasps.values())} grasps to {out}")


def _ontology(args) -> Ontology:
    if args.ontology:
        with open(args.ontology, encoding="utf-8") as fh:
            return Ontology.from_json(json.load(fh))
    if args.data:
        return load_dataset(args.data).ontology
    raise UsageError("build-kg needs --ontology or --data")


def cmd_build_kg(args) -> None:
    onto = _ontology(args)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    rows = []
    for v in variants:
        g = build_graph(onto, v, args.include_instances)
        rows.append((v, g))
        line = f"{v:<13} nodes {len(g):>5}  edges {len(g.edges):>5}"
        if args.published:
            n, e = PUBLISHED_COUNTS[v]
            line += f"   (published full-ontology counts: nodes {n}, edges {e})"
        print(line)
    if args.out:
        if len(rows) != 1:
            raise UsageError("--out needs a single --variant")
        with _atomic_file(args.out) as tmp:
            tmp.write_text(rows[0][1].dumps(), encoding="utf-8")


def _fold(dataset, cfg: RunConfig, mode: str, fold: int, seed: int):
    plan = make_splits(dataset, mode, cfg.k_folds, seed, cfg.val_fraction)
    if not 0 <= fold < len(plan.folds):
        raise UsageError(f"--fold must lie in [0, {len(plan.folds) - 1}]")
    return plan.folds[fold]


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    ds = load_dataset(args.data)
    fold = _fold(ds, cfg, args.mode, args.fold, args.seed)
    log.info("training %s on fold %d (%s, seed %d)", args.type, args.fold, args.mode, args.seed)
    model = build_model(args.type, cfg, ds, 1000 * args.seed + args.fold)
    history = train(model, ds, fold, args.mode, cfg.train_config(args.seed))
    with _atomic_file(args.out) as tmp:
        save_checkpoint(model, tmp)
    if args.history:
        _write_json(args.history, {
            "format": "gcngrasp.train_history", "version": 1, "config": cfg.to_json(),
            "config_sha256": cfg.sha256(), "seed": args.seed, "fold": args.fold, "mode": args.mode,
            "history": history.to_json(),
        })
    print(f"final train loss {history.train_loss[-1]:.4f}")


def cmd_eval(args) -> None:
    cfg = _load_config(args.config)
    ds = load_dataset(args.data)
    model = load_checkpoint(args.model)
    fold = _fold(ds, cfg, args.mode, args.fold, args.seed)
    test = select_samples(ds, args.mode, fold.held_out)
    preds = predict(model, ds, test, SampleCache(ds, model.config), fold=args.fold)
    rep = map_report(preds, ds, [{"fold": args.fold, "held_out": fold.held_out}], require_complete=False)
    doc = {"config": cfg.to_json(), "config_sha256": cfg.sha256(), "seed": args.seed, "mode": args.mode,
           "fold": args.fold, "report": rep.to_json(), "note": SCALE_NOTE}
    if args.out:
        _write_json(args.out, doc)
    print(render_table({model.kind: rep}, highlight=args.mode), end="")


def _crossval(args, kind: str) -> None:
    cfg = _load_config(args.config)
    ds = load_dataset(args.data)
    seeds = cfg.random_seeds if kind == "random" else cfg.seeds
    log.info("%s crossval, mode %s, seeds %s", kind, args.mode, list(seeds))
    doc = run_crossval(ds, args.mode, kind, cfg, args.k)
    _write_json(args.out, doc)
    print(render_table({kind: mean_report(doc)}, highlight=args.mode), end="")
    print(SCALE_NOTE)


def cmd_crossval(args) -> None:
    _crossval(args, args.model)


def cmd_baseline(args) -> None:
    _crossval(args, args.type)


def cmd_aggregate(args) -> None:
    votes = read_votes(args.raw)
    gold = read_gold(args.gold) if args.gold else None
    qualified, warnings, accuracy = None, [], {}
    if gold is not None:
        if args.threshold is None and args.top_fraction is None:
            raise UsageError("--gold needs --threshold or --top-fraction")
        q = filter_annotators(votes, gold, args.threshold, args.top_fraction)
        qualified, warnings, accuracy = q.qualified, q.warnings, q.accuracy
        for w in warnings:
            log.warning(w)
    agg = aggregate(votes, qualified, gold)
    _write_json(args.out, {
        "format": "gcngrasp.aggregated_labels", "version": 1,
        "labels": agg.labels, "ties": agg.ties,
        "qualified": sorted(qualified) if qualified is not None else None,
        "accuracy": accuracy, "warnings": warnings,
    })
    print(f"{len(agg.labels)} items aggregated, {len(agg.ties)} ties")


def cmd_kappa(args) -> None:
    votes = read_votes(args.raw)
    if args.per_object:
        by_obj = {}
        for v in votes:
            if v.stage == 2:
                by_obj.setdefault(v.object_id, {}).setdefault(v.task, {}).setdefault(v.grasp_id, []).append(v.vote)
        from .annotation import majority_vote

        for oid in sorted(by_obj):
            labels = {t: {g: majority_vote(vs)[0] for g, vs in gs.items()} for t, gs in by_obj[oid].items()}
            print(f"{oid}\t{task_agreement_kappa(labels):.6f}")
        return
    k = kappa_from_votes(votes, args.stage)
    print(f"{k:.6f}")


def cmd_report(args) -> None:
    rows, mode = {}, None
    for path in args.inputs:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") == "gcngrasp.crossval_report":
            rows[doc["model"]] = mean_report(doc)
            mode = mode or doc["mode"]
        elif "report" in doc:
            rows[Path(path).stem] = EvalReport.from_json(doc["report"])
            mode = mode or doc.get("mode")
        else:
            rows[Path(path).stem] = EvalReport.from_json(doc)
    text = render_table(rows, highlight=mode)
    if args.out:
        with _atomic_file(args.out) as tmp:
            tmp.write_text(text, encoding="utf-8")
    print(text, end="")


# --- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcngrasp", description="Task-oriented grasp scoring with a knowledge-graph GCN.")
    p.add_argument("--version", action="version", version=f"gcngrasp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synthetic", help="write a procedural tool dataset")
    s.add_argument("--out", required=True, help="new dataset directory")
    s.add_argument("--objects", type=int, default=12)
    s.add_argument("--classes", type=int, default=6)
    s.add_argument("--grasps", type=int, default=20, help="grasps per object")
    s.add_argument("--points", type=int, default=256, help="points per object")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("build-kg", help="build the knowledge graph and print node/edge counts")
    s.add_argument("--ontology", help="ontology.json")
    s.add_argument("--data", help="dataset directory (uses its ontology)")
    s.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    s.add_argument("--include-instances", action="store_true")
    s.add_argument("--published", action="store_true", help="print the published full-ontology counts alongside")
    s.add_argument("--out", help="graph JSON (single variant only)")
    s.set_defaults(func=cmd_build_kg)

    for name, func, helptext in (("train", cmd_train, "train one fold and save a checkpoint"),
                                 ("eval", cmd_eval, "score a checkpoint on its fold's held-out set")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--config")
        s.add_argument("--mode", choices=MODES, default="instance")
        s.add_argument("--fold", type=int, default=0)
        s.add_argument("--seed", type=int, default=0, help="split / initialisation seed")
        if name == "train":
            s.add_argument("--type", choices=("gcn", "sgn", "sgn-we"), default="gcn")
            s.add_argument("--out", required=True, help="checkpoint path")
            s.add_argument("--history", help="per-epoch history JSON")
        else:
            s.add_argument("--model", required=True, help="checkpoint path")
            s.add_argument("--out", help="report JSON")
        s.set_defaults(func=func)

    for name, func in (("crossval", cmd_crossval), ("baseline", cmd_baseline)):
        s = sub.add_parser(name, help="k-fold held-out evaluation" if name == "crossval" else "run a baseline under the crossval protocol")
        s.add_argument("--data", required=True)
        s.add_argument("--mode", choices=MODES, required=True)
        s.add_argument("--k", type=int, help="folds (default: k_folds from the config)")
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        if name == "crossval":
            s.add_argument("--model", choices=MODEL_TYPES, default="gcn")
        else:
            s.add_argument("--type", choices=MODEL_TYPES, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("aggregate", help="majority-vote crowd labels")
    s.add_argument("--raw", required=True, help="vote CSV")
    s.add_argument("--gold", help="gold CSV for annotator qualification")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float)
    g.add_argument("--top-fraction", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("kappa", help="Randolph free-marginal kappa of raw votes")
    s.add_argument("--raw", required=True)
    s.add_argument("--stage", type=int, choices=(1, 2))
    s.add_argument("--per-object", action="store_true", help="task-agreement kappa per object (stage-2 votes)")
    s.set_defaults(func=cmd_kappa)

    s = sub.add_parser("report", help="render report JSON files as a text table")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"gcngrasp: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"gcngrasp: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
