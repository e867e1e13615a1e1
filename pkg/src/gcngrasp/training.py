"""Training loop, batched prediction and the k-fold cross-validation runner."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import Dataset
from .encoders import GeometryPlan, plan_geometry
from .evaluation import Fold, Prediction, SplitPlan, category_of, grouped_map, make_splits, map_report
from .model import ModelConfig
from .pointcloud import AugmentParams, FusedCloud, augment, fuse_grasp_object, normalize_pose, preprocess

log = logging.getLogger(__name__)

Sample = tuple  # (object_id, grasp_id, task, label)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch: int = 16  # grasps per step; each grasp brings all of its training tasks
    lr: float = 1e-3
    seed: int = 0
    balance: bool = True
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_map: list[float | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


class SampleCache:
    """Preprocessed objects and per-grasp fused clouds / geometry plans."""

    def __init__(self, dataset: Dataset, config: ModelConfig):
        self.dataset = dataset
        self.config = config
        self._objects: dict[str, tuple] = {}
        self._plans: dict[tuple[str, str], GeometryPlan] = {}
        self._poses = {(g.object_id, g.grasp_id): g.pose for gs in dataset.grasps.values() for g in gs}

    def _object(self, oid: str):
        if oid not in self._objects:
            self._objects[oid] = preprocess(self.dataset.objects[oid], self.config.target_n, return_transform=True)
        return self._objects[oid]

    def fused(self, oid: str, gid: str) -> FusedCloud:
        cloud, (centroid, scale) = self._object(oid)
        pose = normalize_pose(self._poses[(oid, gid)], centroid, scale)
        return fuse_grasp_object(cloud, pose, gripper_scale=1.0 / scale)

    def plan(self, oid: str, gid: str, params: AugmentParams | None = None, seed: int = 0) -> GeometryPlan:
        if params is not None and params.active:
            return plan_geometry(augment(self.fused(oid, gid), params, seed), self.config.encoder)
        key = (oid, gid)
        if key not in self._plans:
            self._plans[key] = plan_geometry(self.fused(oid, gid), self.config.encoder)
        return self._plans[key]


def select_samples(dataset: Dataset, mode: str, cats: Sequence[str]) -> list[Sample]:
    wanted = set(cats)
    return [s for s in dataset.samples() if category_of(dataset, mode, s[0], s[2]) in wanted]


def _by_grasp(samples: Sequence[Sample]) -> dict[tuple[str, str], list[tuple[str, int]]]:
    groups = defaultdict(list)
    for oid, gid, task, label in samples:
        groups[(oid, gid)].append((task, label))
    return dict(groups)


def _batch_inputs(dataset, keys, groups, plan_for):
    plans, index, classes, tasks, labels = [], [], [], [], []
    for j, key in enumerate(keys):
        plans.append(plan_for(key))
        cls = dataset.object_class(key[0])
        for task, label in groups[key]:
            index.append(j)
            classes.append(cls)
            tasks.append(task)
            labels.append(label)
    return plans, index, classes, tasks, np.array(labels, dtype=np.float64)


def balance_weights(labels: np.ndarray) -> np.ndarray:
    """Equal total weight for the positives and negatives of a batch."""
    pos = labels.sum()
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        return np.ones_like(labels)
    return np.where(labels > 0, 0.5 / pos, 0.5 / neg)


def predict(model, dataset: Dataset, samples: Sequence[Sample], cache: SampleCache, batch: int = 32, fold: int = 0) -> list[Prediction]:
    groups = _by_grasp(samples)
    keys = sorted(groups)
    out = []
    with T.no_grad():
        for start in range(0, len(keys), batch):
            bk = keys[start:start + batch]
            plans, index, classes, tasks, labels = _batch_inputs(dataset, bk, groups, lambda k: cache.plan(*k))
            scores = model.forward_batch(plans, index, classes, tasks).data
            for i, j in enumerate(index):
                oid, gid = bk[j]
                out.append(Prediction(oid, gid, tasks[i], float(scores[i]), int(labels[i]), fold))
    return out


_GROUP_KEY = {
    "instance": lambda p: p.object_id,
    "task": lambda p: p.task,
}


def train(model, dataset: Dataset, fold: Fold, mode: str, config: TrainConfig, cache: SampleCache | None = None) -> History:
    """ADAM on weighted BCE over the fold's training categories.

    Steps visit grasps in a seeded order; each fused cloud is encoded once
    per step and scored for all of its training tasks. Validation mAP is
    recorded per epoch when the fold has validation categories.
    """
    cache = cache or SampleCache(dataset, model.config)
    train_samples = select_samples(dataset, mode, fold.train)
    if not train_samples:
        raise ValueError("the training partition is empty")
    val_samples = select_samples(dataset, mode, fold.validation)
    groups = _by_grasp(train_samples)
    keys = sorted(groups)
    params = model.parameters()
    state = T.AdamState.fresh(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    if mode == "class":
        group_key = lambda p: dataset.object_class(p.object_id)  # noqa: E731
    else:
        group_key = _GROUP_KEY[mode]
    history = History()
    for epoch in range(config.epochs):
        perm = rng.permutation(len(keys))
        total, count = 0.0, 0
        for start in range(0, len(keys), config.batch):
            bk = [keys[i] for i in perm[start:start + config.batch]]
            aug_seeds = rng.integers(2**63, size=len(bk)) if config.augment.active else np.zeros(len(bk), dtype=np.int64)
            seed_of = dict(zip(bk, aug_seeds))
            plans, index, classes, tasks, labels = _batch_inputs(
                dataset, bk, groups, lambda k: cache.plan(*k, params=config.augment, seed=int(seed_of[k]))
            )
            preds = model.forward_batch(plans, index, classes, tasks)
            weights = balance_weights(labels) if config.balance else None
            loss = T.bce_loss(preds, labels, weights)
            T.backward(loss)
            T.adam_step(params, None, state)
            for p in params:
                p.zero_grad()
            total += loss.item() * len(labels)
            count += len(labels)
        history.train_loss.append(total / count)
        if val_samples:
            history.val_map.append(grouped_map(predict(model, dataset, val_samples, cache), group_key))
        else:
            history.val_map.append(None)
        log.debug("epoch %d loss %.4f val %s", epoch, history.train_loss[-1], history.val_map[-1])
    return history


@dataclass
class CrossvalResult:
    plan: SplitPlan
    predictions: list[Prediction]
    histories: list[History]

    def report(self, dataset: Dataset):
        folds = [
            {"fold": i, "held_out": f.held_out, "train": f.train, "validation": f.validation,
             "history": h.to_json() if h is not None else None}
            for i, (f, h) in enumerate(zip(self.plan.folds, self.histories))
        ]
        return map_report(self.predictions, dataset, folds)


def crossval(
    dataset: Dataset,
    mode: str,
    make_model: Callable[[int], object] | None,
    train_config: TrainConfig,
    k: int = 4,
    split_seed: int = 0,
    val_fraction: float = 0.1,
    model_config: ModelConfig | None = None,
    random_seed: int | None = None,
) -> CrossvalResult:
    """Train one model per fold and pool the held-out predictions.

    ``make_model(fold_index)`` builds a fresh model. With ``make_model=None``
    the fold's test pairs are scored by the seeded random baseline instead.
    """
    from .model import random_baseline

    plan = make_splits(dataset, mode, k, split_seed, val_fraction)
    preds: list[Prediction] = []
    histories: list[History | None] = []
    cache = None
    for i, fold in enumerate(plan.folds):
        test = select_samples(dataset, mode, fold.held_out)
        if make_model is None:
            scores = random_baseline([s[:3] for s in test], (random_seed or 0) * 1000 + i)
            preds += [Prediction(o, g, t, scores[(o, g, t)], y, i) for o, g, t, y in test]
            histories.append(None)
            continue
        model = make_model(i)
        if cache is None:
            cache = SampleCache(dataset, model.config)
        cfg = TrainConfig(**{**asdict(train_config), "augment": train_config.augment, "seed": train_config.seed * 1000 + i})
        histories.append(train(model, dataset, fold, mode, cfg, cache))
        preds += predict(model, dataset, test, cache, fold=i)
    return CrossvalResult(plan, preds, histories)
