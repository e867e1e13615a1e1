"""Reproducible cross-validation runs that emit versioned JSON reports."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .dataset import Dataset
from .evaluation import MODES, EvalReport
from .model import GcnGraspModel, SgnModel
from .training import crossval

MODEL_TYPES = ("gcn", "sgn", "sgn-we", "random")
CROSSVAL_FORMAT = "gcngrasp.crossval_report"
CROSSVAL_VERSION = 1
SCALE_NOTE = (
    "Desk-scale synthetic run. Absolute mAPs are not comparable with results "
    "on the real TaskGrasp dataset, which this run does not use."
)


def build_model(kind: str, cfg: RunConfig, dataset: Dataset, seed: int):
    mc = cfg.model_config()
    path = cfg.embeddings or None
    if kind == "gcn":
        return GcnGraspModel.create(mc, dataset.ontology, seed, path)
    if kind == "sgn":
        return SgnModel.create(mc, dataset.ontology, seed, pretrained=False)
    if kind == "sgn-we":
        return SgnModel.create(mc, dataset.ontology, seed, pretrained=True, embeddings_path=path)
    raise ValueError(f"unknown model type {kind!r}; expected one of {MODEL_TYPES}")


def run_crossval(dataset: Dataset, mode: str, kind: str, cfg: RunConfig, k: int | None = None) -> dict:
    """k-fold held-out run for every configured seed; mAPs averaged over seeds.

    Seed ``s`` fixes the split plan, the weight initialisation of fold ``i``
    (``1000 * s + i``) and the batch order. The random baseline uses
    ``random_seeds`` instead of ``seeds``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown held-out mode {mode!r}; expected one of {MODES}")
    if kind not in MODEL_TYPES:
        raise ValueError(f"unknown model type {kind!r}; expected one of {MODEL_TYPES}")
    k = k or cfg.k_folds
    seeds = cfg.random_seeds if kind == "random" else cfg.seeds
    runs = []
    for s in seeds:
        if kind == "random":
            res = crossval(dataset, mode, None, cfg.train_config(s), k, s, cfg.val_fraction, random_seed=s)
        else:
            make = lambda i, s=s: build_model(kind, cfg, dataset, 1000 * s + i)  # noqa: E731
            res = crossval(dataset, mode, make, cfg.train_config(s), k, s, cfg.val_fraction)
        runs.append({"seed": s, "split_plan": res.plan.to_json(), "report": res.report(dataset).to_json()})
    mean = {m: float(np.mean([r["report"][f"map_{m}"] for r in runs])) for m in MODES}
    return {
        "format": CROSSVAL_FORMAT,
        "version": CROSSVAL_VERSION,
        "model": kind,
        "mode": mode,
        "k": k,
        "seeds": list(seeds),
        "config": cfg.to_json(),
        "config_sha256": cfg.sha256(),
        "runs": runs,
        "mean_map": mean,
        "note": SCALE_NOTE,
    }


def mean_report(doc: dict) -> EvalReport:
    """Seed-averaged mAPs as an EvalReport (for table rendering)."""
    reps = [EvalReport.from_json(r["report"]) for r in doc["runs"]]
    if len(reps) == 1:
        return reps[0]
    m = doc["mean_map"]
    return EvalReport({}, {}, {}, m["instance"], m["class"], m["task"])
