"""Held-out splits, average precision and the pooled mAP report."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

MODES = ("instance", "class", "task")
SPLIT_VERSION = 1
REPORT_VERSION = 1


@dataclass
class Fold:
    held_out: list[str]
    train: list[str]
    validation: list[str]


@dataclass
class SplitPlan:
    mode: str
    k: int
    seed: int
    folds: list[Fold]

    def to_json(self) -> dict:
        return {"format": "gcngrasp.split_plan", "version": SPLIT_VERSION, **asdict(self)}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitPlan":
        if doc.get("version") != SPLIT_VERSION:
            raise ValueError("unsupported split plan version")
        return cls(doc["mode"], doc["k"], doc["seed"], [Fold(**f) for f in doc["folds"]])


def categories(dataset, mode: str) -> list[str]:
    if mode == "instance":
        return sorted(dataset.objects)
    if mode == "class":
        return sorted({dataset.object_class(o) for o in dataset.objects})
    if mode == "task":
        return sorted({t for _, _, t, _ in dataset.samples()})
    raise ValueError(f"unknown held-out mode {mode!r}; expected one of {MODES}")


def category_of(dataset, mode: str, object_id: str, task: str) -> str:
    if mode == "instance":
        return object_id
    if mode == "class":
        return dataset.object_class(object_id)
    return task


def make_splits(dataset_or_categories, mode: str, k: int = 4, seed: int = 0, val_fraction: float = 0.1) -> SplitPlan:
    """k folds whose held-out sets partition the categories.

    Categories are shuffled by ``seed`` and dealt round-robin. In each fold
    ``ceil(val_fraction * remaining)`` of the other categories (at least one
    when ``val_fraction > 0``) are reserved for validation.
    """
    if mode not in MODES:
        raise ValueError(f"unknown held-out mode {mode!r}; expected one of {MODES}")
    if isinstance(dataset_or_categories, (list, tuple)):
        cats = sorted(dataset_or_categories)
    else:
        cats = categories(dataset_or_categories, mode)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(cats):
        raise ValueError(f"cannot make {k} folds from {len(cats)} {mode} categories")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    shuffled = [cats[i] for i in rng.permutation(len(cats))]
    held = [sorted(shuffled[i::k]) for i in range(k)]
    folds = []
    for i in range(k):
        rest = sorted(set(cats) - set(held[i]))
        n_val = 0
        if val_fraction > 0:
            n_val = min(max(1, math.ceil(val_fraction * len(rest))), len(rest) - 1)
        val = sorted(rest[j] for j in rng.permutation(len(rest))[:n_val])
        folds.append(Fold(held[i], sorted(set(rest) - set(val)), val))
    return SplitPlan(mode, k, seed, folds)


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP; ties keep input order. ``None`` when there are no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape} scores vs {labels.shape} labels")
    if not labels.any():
        return None
    ranked = labels[np.argsort(-scores, kind="stable")].astype(bool)
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float(np.mean(hits[ranked] / ranks[ranked]))


@dataclass(frozen=True)
class Prediction:
    object_id: str
    grasp_id: str
    task: str
    score: float
    label: int
    fold: int = 0


@dataclass
class EvalReport:
    ap_instance: dict[str, float]
    ap_class: dict[str, float]
    ap_task: dict[str, float]
    map_instance: float
    map_class: float
    map_task: float
    excluded: dict[str, list[str]] = field(default_factory=dict)
    folds: list[dict] = field(default_factory=list)

    @property
    def maps(self) -> dict[str, float]:
        return {"instance": self.map_instance, "class": self.map_class, "task": self.map_task}

    def to_json(self) -> dict:
        return {"format": "gcngrasp.eval_report", "version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        if doc.get("version") != REPORT_VERSION:
            raise ValueError("unsupported report version")
        fields = {k: v for k, v in doc.items() if k not in ("format", "version")}
        return cls(**fields)


def _grouped_ap(groups: dict[str, list[Prediction]]):
    aps, excluded = {}, []
    for key in sorted(groups):
        preds = groups[key]
        ap = average_precision([p.score for p in preds], [p.label for p in preds])
        if ap is None:
            excluded.append(key)
        else:
            aps[key] = ap
    mean = float(np.mean(list(aps.values()))) if aps else float("nan")
    return aps, mean, excluded


def map_report(
    predictions: Iterable[Prediction],
    dataset=None,
    folds: Sequence[dict] = (),
    require_complete: bool = True,
) -> EvalReport:
    """AP per instance / class / task and their means over pooled predictions.

    Predictions are canonically ordered first, so record order never changes
    the result. With ``dataset`` given (and ``require_complete``), every
    labeled (object, grasp, task) must be predicted exactly once.
    """
    preds = sorted(predictions, key=lambda p: (p.object_id, p.grasp_id, p.task))
    seen = set()
    for p in preds:
        key = (p.object_id, p.grasp_id, p.task)
        if key in seen:
            raise ValueError(f"duplicate prediction for {key}")
        seen.add(key)
    if dataset is not None and require_complete:
        expected = {(o, g, t) for o, g, t, _ in dataset.samples()}
        missing, extra = expected - seen, seen - expected
        if missing or extra:
            raise ValueError(f"predictions incomplete: {len(missing)} missing, {len(extra)} unexpected")
    by_instance, by_class, by_task = defaultdict(list), defaultdict(list), defaultdict(list)
    for p in preds:
        by_instance[p.object_id].append(p)
        by_task[p.task].append(p)
        if dataset is not None:
            by_class[dataset.object_class(p.object_id)].append(p)
    ap_i, m_i, ex_i = _grouped_ap(by_instance)
    ap_c, m_c, ex_c = _grouped_ap(by_class) if dataset is not None else ({}, float("nan"), [])
    ap_t, m_t, ex_t = _grouped_ap(by_task)
    return EvalReport(ap_i, ap_c, ap_t, m_i, m_c, m_t, {"instance": ex_i, "class": ex_c, "task": ex_t}, list(folds))


def grouped_map(predictions: Sequence[Prediction], key) -> float:
    groups = defaultdict(list)
    for p in sorted(predictions, key=lambda p: (p.object_id, p.grasp_id, p.task)):
        groups[key(p)].append(p)
    return _grouped_ap(groups)[1]


def render_table(rows: dict[str, EvalReport], highlight: str | None = None, title: str = "Test Performance (mAP)") -> str:
    """Aligned text table with Instances / Classes / Tasks columns, in percent."""
    name_w = max([len("Model")] + [len(n) for n in rows])
    cols = [("Instances", "instance"), ("Classes", "class"), ("Tasks", "task")]
    header = "Model".ljust(name_w) + "".join(
        f"  {(c + '*') if highlight == m else c:>10}" for c, m in cols
    )
    lines = [title, header, "-" * len(header)]
    for name, rep in rows.items():
        vals = rep.maps
        lines.append(name.ljust(name_w) + "".join(f"  {100 * vals[m]:>10.2f}" for _, m in cols))
    if highlight:
        lines.append(f"* held-out setting: {highlight}")
    return "\n".join(lines) + "\n"


def dumps(doc) -> str:
    """Canonical JSON text used for every artifact (stable bytes across runs)."""
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"
