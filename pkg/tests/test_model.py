import dataclasses

import numpy as np
import pytest

from gcngrasp import tensor as T
from gcngrasp.dataset import generate_synthetic, SyntheticConfig
from gcngrasp.evaluation import Fold
from gcngrasp.knowledge_graph import normalize_adjacency
from gcngrasp.model import (
    PRESETS,
    GcnGraspModel,
    SgnModel,
    gcn_forward,
    gcn_layer,
    load_checkpoint,
    model_graph,
    random_baseline,
    save_checkpoint,
    sgn_forward,
)
from gcngrasp.tensor import Tensor
from gcngrasp.training import SampleCache, TrainConfig, train

DESK = PRESETS["desk"]


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic(SyntheticConfig(n_objects=6, grasps_per_object=6, points_per_object=96), seed=3)
    return ds, SampleCache(ds, DESK)


def test_gcn_layer_examples():
    h = np.array([[1.0, 2.0], [0.5, 0.0], [3.0, 1.0]])
    np.testing.assert_array_equal(gcn_layer(h, np.eye(3), np.eye(2)).data, h)
    out = gcn_layer([[2.0], [0.0]], [[0.5, 0.5], [0.5, 0.5]], [[1.0]])
    np.testing.assert_array_equal(out.data, [[1.0], [1.0]])
    assert gcn_layer([[-1.0]], [[1.0]], [[1.0]]).data[0, 0] == 0.0
    with pytest.raises(ValueError):
        gcn_layer(np.ones((3, 2)), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        gcn_layer(np.ones((3, 2)), np.eye(3), np.eye(3))


def test_gcn_layer_permutation_equivariance():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = 6
        a = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
        a_hat = normalize_adjacency(a + a.T)
        h, w = rng.normal(size=(n, 4)), rng.normal(size=(4, 3))
        perm = rng.permutation(n)
        p = np.eye(n)[perm]
        base = gcn_layer(h, a_hat, w).data
        moved = gcn_layer(p @ h, p @ a_hat @ p.T, w).data
        np.testing.assert_allclose(moved, base[perm], atol=1e-12)


def test_model_graph_adds_isolated_tasks_for_wordnet_only(mini_ontology):
    g = model_graph(mini_ontology, "wordnet_only")
    tasks = [n for n in g.nodes if n[0] == "task"]
    assert len(tasks) == len(mini_ontology.tasks)
    assert all(g.degree(t) == 0 for t in tasks)


def _zero(model):
    for t in model.weights.values():
        t.data[...] = 0.0
    return model


def test_gcn_forward_basic(small):
    ds, cache = small
    m = GcnGraspModel.create(DESK, ds.ontology, seed=0)
    oid = sorted(ds.objects)[0]
    cls = ds.object_class(oid)
    task = ds.ontology.tasks_for(cls)[0]
    fused = cache.fused(oid, "0")
    s1 = gcn_forward(m, None, fused, ("class", cls), ("task", task))
    s2 = gcn_forward(m, m.graph, fused, ("class", cls), ("task", task))
    assert s1 == s2 and 0.0 < s1 < 1.0
    with pytest.raises(KeyError):
        gcn_forward(m, None, fused, ("class", "nothing.n.01"), ("task", task))
    with pytest.raises(KeyError):
        gcn_forward(m, None, fused, ("class", cls), ("task", "juggle"))
    assert gcn_forward(_zero(m), None, fused, ("class", cls), ("task", task)) == 0.5


def test_batch_matches_separate_calls(small):
    ds, cache = small
    m = GcnGraspModel.create(DESK, ds.ontology, seed=1)
    keys = [(o, str(g)) for o in sorted(ds.objects)[:3] for g in range(2)]
    plans = [cache.plan(*k) for k in keys]
    classes = [ds.object_class(o) for o, _ in keys]
    tasks = [ds.ontology.tasks_for(c)[-1] for c in classes]
    with T.no_grad():
        together = m.forward_batch(plans, range(len(keys)), classes, tasks).data
        apart = [m.forward_batch([p], [0], [c], [t]).data[0] for p, c, t in zip(plans, classes, tasks)]
    np.testing.assert_array_equal(together, apart)


def test_initial_loss_near_ln2(small):
    ds, cache = small
    keys = [(o, str(g)) for o in sorted(ds.objects) for g in range(6)]
    plans = [cache.plan(*k) for k in keys]
    classes = [ds.object_class(o) for o, _ in keys]
    tasks = [ds.ontology.tasks_for(c)[0] for c in classes]
    losses = []
    for seed in range(10):
        m = GcnGraspModel.create(DESK, ds.ontology, seed=seed)
        labels = np.random.default_rng(seed).integers(0, 2, size=len(keys))
        with T.no_grad():
            losses.append(T.bce_loss(m.forward_batch(plans, range(len(keys)), classes, tasks), labels).item())
    assert abs(np.mean(losses) - np.log(2)) < 0.15


def test_sgn_forward(small):
    ds, cache = small
    oid = sorted(ds.objects)[0]
    cls = ds.object_class(oid)
    t0, t1 = ds.ontology.tasks_for(cls)[:2]
    fused = cache.fused(oid, "1")
    for seed in range(10):
        m = SgnModel.create(DESK, ds.ontology, seed=seed)
        a = sgn_forward(m, fused, cls, t0)
        assert a == sgn_forward(m, fused, cls, t0)
        assert a != sgn_forward(m, fused, cls, t1)
    with pytest.raises(KeyError):
        sgn_forward(m, fused, cls, "juggle")
    assert sgn_forward(_zero(m), fused, cls, t0) == 0.5


def test_sgn_pretrained_tables_are_frozen(small):
    ds, _ = small
    m = SgnModel.create(DESK, ds.ontology, seed=0, pretrained=True)
    names = {id(p) for p in m.parameters()}
    assert id(m.weights["sgn.task_table"]) not in names
    learned = SgnModel.create(DESK, ds.ontology, seed=0)
    assert id(learned.weights["sgn.task_table"]) in {id(p) for p in learned.parameters()}


def test_random_baseline():
    keys = [("o", str(i), "t") for i in range(100_000)]
    a = random_baseline(keys, seed=4)
    assert a == random_baseline(keys, seed=4)
    assert 0.497 <= np.mean(list(a.values())) <= 0.503


def test_checkpoint_round_trip(small, tmp_path):
    ds, cache = small
    for model in (GcnGraspModel.create(DESK, ds.ontology, seed=2), SgnModel.create(DESK, ds.ontology, seed=2, pretrained=True)):
        p1, p2 = tmp_path / f"{model.kind}1.ckpt", tmp_path / f"{model.kind}2.ckpt"
        save_checkpoint(model, p1)
        back = load_checkpoint(p1)
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        oid = sorted(ds.objects)[1]
        cls = ds.object_class(oid)
        task = ds.ontology.tasks_for(cls)[0]
        plan = [cache.plan(oid, "2")]
        with T.no_grad():
            assert model.forward_batch(plan, [0], [cls], [task]).data[0] == back.forward_batch(plan, [0], [cls], [task]).data[0]
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + p1.read_bytes()[8:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)


def test_training_overfits_twenty_samples(small):
    ds, cache = small
    oids = sorted(ds.objects)
    # 20 (grasp, task) samples: one object of each of the first classes, first grasps
    fold = Fold(held_out=[], train=oids[:2], validation=[])
    sub = dataclasses.replace(ds, grasps={o: ds.grasps[o][:3] for o in oids[:2]})
    n = sum(len(g.labels) for o in oids[:2] for g in sub.grasps[o])
    assert 14 <= n <= 24
    m = GcnGraspModel.create(DESK, ds.ontology, seed=0)
    hist = train(m, sub, fold, "instance", TrainConfig(epochs=200, batch=16, seed=0), cache)
    assert hist.train_loss[-1] < 0.05


def test_training_is_deterministic_and_rejects_empty(small):
    ds, cache = small
    oids = sorted(ds.objects)
    fold = Fold(held_out=oids[:2], train=oids[2:5], validation=oids[5:])
    runs = []
    for _ in range(2):
        m = GcnGraspModel.create(DESK, ds.ontology, seed=5)
        runs.append(train(m, ds, fold, "instance", TrainConfig(epochs=3, seed=9), cache))
    assert runs[0] == runs[1]
    assert len(runs[0].val_map) == 3 and runs[0].val_map[0] is not None
    with pytest.raises(ValueError, match="empty"):
        train(m, ds, Fold(oids, [], []), "instance", TrainConfig(epochs=1), cache)
