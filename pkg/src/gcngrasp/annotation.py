"""Crowd-label aggregation: gold-question qualification, majority vote, Randolph's kappa.

Vote CSV columns: ``object_id,task,grasp_id,annotator_id,vote``, with an
empty ``grasp_id`` for stage-1 (object/task) questions. Gold CSV columns:
``item_key,truth`` where ``item_key`` is ``object_id|task|grasp_id``.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

VOTE_HEADER = ["object_id", "task", "grasp_id", "annotator_id", "vote"]
GOLD_HEADER = ["item_key", "truth"]


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class VoteRecord:
    object_id: str
    task: str
    grasp_id: str
    annotator_id: str
    vote: int

    @property
    def item_key(self) -> str:
        return f"{self.object_id}|{self.task}|{self.grasp_id}"

    @property
    def stage(self) -> int:
        return 1 if self.grasp_id == "" else 2


def _check_binary(value: str, where: str) -> int:
    if value not in ("0", "1"):
        raise AnnotationError(f"{where}: vote must be 0 or 1, got {value!r}")
    return int(value)


def read_votes(path) -> list[VoteRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != VOTE_HEADER:
            raise AnnotationError(f"{path}:1: expected header {','.join(VOTE_HEADER)}")
        votes, seen = [], set()
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(VOTE_HEADER):
                raise AnnotationError(f"{path}:{lineno}: expected {len(VOTE_HEADER)} fields, found {len(row)}")
            rec = VoteRecord(row[0], row[1], row[2], row[3], _check_binary(row[4], f"{path}:{lineno}"))
            key = (rec.item_key, rec.annotator_id)
            if key in seen:
                raise AnnotationError(f"{path}:{lineno}: annotator {rec.annotator_id!r} voted twice on {rec.item_key!r}")
            seen.add(key)
            votes.append(rec)
    return votes


def write_votes(path, votes: Iterable[VoteRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VOTE_HEADER)
        for v in votes:
            w.writerow([v.object_id, v.task, v.grasp_id, v.annotator_id, v.vote])


def read_gold(path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != GOLD_HEADER:
            raise AnnotationError(f"{path}:1: expected header {','.join(GOLD_HEADER)}")
        gold = {}
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise AnnotationError(f"{path}:{lineno}: expected 2 fields, found {len(row)}")
            gold[row[0]] = _check_binary(row[1], f"{path}:{lineno}")
    return gold


@dataclass
class Qualification:
    qualified: set[str]
    accuracy: dict[str, float]
    warnings: list[str] = field(default_factory=list)


def filter_annotators(
    votes: Sequence[VoteRecord],
    gold: Mapping[str, int],
    threshold: float | None = None,
    top_fraction: float | None = None,
) -> Qualification:
    """Keep annotators by gold-question accuracy.

    Exactly one of ``threshold`` (keep accuracy >= threshold) and
    ``top_fraction`` (keep the ceil(f * A) most accurate, ties broken by
    annotator id) must be given. Annotators without gold answers are
    dropped and reported in ``warnings``.
    """
    if (threshold is None) == (top_fraction is None):
        raise ValueError("give exactly one of threshold and top_fraction")
    correct, answered = defaultdict(int), defaultdict(int)
    annotators = sorted({v.annotator_id for v in votes})
    for v in votes:
        if v.item_key in gold:
            answered[v.annotator_id] += 1
            correct[v.annotator_id] += int(v.vote == gold[v.item_key])
    warnings = [f"annotator {a!r} answered no gold questions; excluded" for a in annotators if answered[a] == 0]
    acc = {a: correct[a] / answered[a] for a in annotators if answered[a] > 0}
    if threshold is not None:
        kept = {a for a, x in acc.items() if x >= threshold}
    else:
        if not 0.0 <= top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in [0, 1]")
        ranked = sorted(acc, key=lambda a: (-acc[a], a))
        kept = set(ranked[: math.ceil(top_fraction * len(ranked))])
    return Qualification(kept, acc, warnings)


def majority_vote(votes: Sequence[int]) -> tuple[int, bool]:
    """Strict-majority label and a tie flag; an exact tie resolves to 0."""
    votes = list(votes)
    if not votes:
        raise ValueError("majority_vote needs at least one vote")
    ones = sum(1 for v in votes if v)
    zeros = len(votes) - ones
    if ones == zeros:
        return 0, True
    return int(ones > zeros), False


@dataclass
class Aggregate:
    labels: dict[str, int]
    ties: list[str]


def aggregate(votes: Sequence[VoteRecord], qualified: set[str] | None = None, gold: Mapping[str, int] | None = None) -> Aggregate:
    """Majority label per item from (qualified) annotators; gold items are skipped."""
    by_item = defaultdict(list)
    for v in votes:
        if qualified is not None and v.annotator_id not in qualified:
            continue
        if gold is not None and v.item_key in gold:
            continue
        by_item[v.item_key].append(v.vote)
    if not by_item:
        raise AnnotationError("no votes left to aggregate")
    labels, ties = {}, []
    for key in sorted(by_item):
        labels[key], tied = majority_vote(by_item[key])
        if tied:
            ties.append(key)
    return Aggregate(labels, ties)


@dataclass
class KappaInput:
    counts: np.ndarray  # items x categories

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] == 0:
            raise ValueError("counts must be a non-empty items x categories table")
        if self.counts.shape[1] < 2:
            raise ValueError("kappa needs at least two categories")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        totals = self.counts.sum(axis=1)
        if np.any(totals != totals[0]):
            raise ValueError("every item needs the same number of raters")
        if totals[0] < 2:
            raise ValueError("kappa needs at least two raters per item")

    @property
    def raters(self) -> int:
        return int(self.counts[0].sum())

    @property
    def categories(self) -> int:
        return self.counts.shape[1]


def randolph_kappa(data) -> float:
    """Free-marginal multirater kappa with chance agreement 1/q."""
    if not isinstance(data, KappaInput):
        data = KappaInput(data)
    c, n, q = data.counts, data.raters, data.categories
    p_obs = float(np.mean((c * (c - 1)).sum(axis=1) / (n * (n - 1))))
    return (p_obs - 1.0 / q) / (1.0 - 1.0 / q)


def kappa_from_votes(votes: Sequence[VoteRecord], stage: int | None = None) -> float:
    by_item = defaultdict(lambda: [0, 0])
    for v in votes:
        if stage is None or v.stage == stage:
            by_item[v.item_key][v.vote] += 1
    if not by_item:
        raise AnnotationError(f"no stage-{stage} votes")
    return randolph_kappa([by_item[k] for k in sorted(by_item)])


def task_agreement_kappa(labels: Mapping[str, Mapping[str, int]]) -> float:
    """Agreement between tasks on one object's grasps (tasks act as raters)."""
    if len(labels) < 2:
        raise ValueError("task agreement needs at least two tasks")
    grasp_sets = {frozenset(g) for g in labels.values()}
    if len(grasp_sets) != 1:
        raise ValueError("all tasks must label the same grasps")
    grasps = sorted(next(iter(grasp_sets)))
    counts = [[sum(1 for t in labels if labels[t][g] == c) for c in (0, 1)] for g in grasps]
    return randolph_kappa(counts)
