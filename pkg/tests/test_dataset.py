import json
import shutil

import numpy as np
import pytest

from gcngrasp.dataset import (
    DatasetError,
    SyntheticConfig,
    generate_synthetic,
    lemma,
    load_dataset,
    load_embeddings,
    pseudo_embedding,
    write_dataset,
)


def test_load_mini_dataset(mini_dataset_root):
    ds = load_dataset(mini_dataset_root)
    assert sorted(ds.objects) == ["mug_0", "pan_0", "spatula_0"]
    assert len(ds.ontology.tasks) == 4
    assert [len(ds.grasps[o]) for o in sorted(ds.grasps)] == [10, 10, 10]
    # valid tasks per class: mug 2, pan 4, spatula 3
    assert sum(1 for _ in ds.samples()) == 90


def test_invalid_task_label_rejected(tmp_path, mini_dataset_root):
    root = tmp_path / "d"
    shutil.copytree(mini_dataset_root, root)
    path = root / "objects" / "mug_0" / "labels.json"
    labels = json.loads(path.read_text())
    labels["saute"] = {"0": 1}
    path.write_text(json.dumps(labels))
    with pytest.raises(DatasetError, match="saute"):
        load_dataset(root)


def test_empty_objects_dir_rejected(tmp_path, mini_dataset_root):
    root = tmp_path / "d"
    (root / "objects").mkdir(parents=True)
    shutil.copy(mini_dataset_root / "ontology.json", root / "ontology.json")
    with pytest.raises(DatasetError, match="no objects"):
        load_dataset(root)


def test_malformed_cloud_reports_line(tmp_path, mini_dataset_root):
    root = tmp_path / "d"
    shutil.copytree(mini_dataset_root, root)
    cloud = root / "objects" / "pan_0" / "cloud.pts"
    lines = cloud.read_text().splitlines()
    lines[3] = "0.1 oops 0.2"
    cloud.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"cloud.pts:4"):
        load_dataset(root)


def test_missing_file_and_dangling_grasp(tmp_path, mini_dataset_root):
    root = tmp_path / "d"
    shutil.copytree(mini_dataset_root, root)
    (root / "objects" / "pan_0" / "grasps.json").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(root)
    shutil.rmtree(root)
    shutil.copytree(mini_dataset_root, root)
    path = root / "objects" / "mug_0" / "labels.json"
    labels = json.loads(path.read_text())
    labels["pour"]["99"] = 1
    path.write_text(json.dumps(labels))
    with pytest.raises(DatasetError, match="99"):
        load_dataset(root)


def test_synthetic_postconditions():
    ds = generate_synthetic(SyntheticConfig(n_objects=12, grasps_per_object=20), seed=7)
    assert sum(len(g) for g in ds.grasps.values()) == 240
    assert len(ds.ontology.tasks) == 6
    for oid, gs in ds.grasps.items():
        tasks = gs[0].labels
        mixed = [t for t in tasks if 0 < sum(g.labels[t] for g in gs) < len(gs)]
        assert len(mixed) >= 2, oid
        if "handover" in tasks:
            assert all(g.labels["handover"] == 1 for g in gs)
        valid = set(ds.ontology.tasks_for(ds.object_class(oid)))
        assert all(set(g.labels) <= valid for g in gs)


def test_synthetic_families():
    onto = generate_synthetic(SyntheticConfig(n_objects=6), seed=0).ontology
    parents = dict(onto.hypernym_edges)
    assert parents["ladle.n.01"] == "vessel.n.03"
    assert parents["spatula.n.01"] == "implement.n.01"
    assert {c for c, t in onto.used_for if t == "hang"} == {"hook.n.04"}
    assert {c for c, t in onto.used_for if t == "pour"} <= {"ladle.n.01", "saucepan.n.01", "measuring_cup.n.01"}


def test_synthetic_validates_config():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(n_classes=1, n_objects=3))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(n_classes=4, n_objects=3))


def test_synthetic_round_trip_and_byte_identity(tmp_path):
    cfg = SyntheticConfig(n_objects=6, grasps_per_object=8, points_per_object=64)
    ds = generate_synthetic(cfg, seed=3)
    write_dataset(ds, tmp_path / "a")
    write_dataset(generate_synthetic(cfg, seed=3), tmp_path / "b")
    assert load_dataset(tmp_path / "a") == ds
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synthetic_seed_changes_data():
    a = generate_synthetic(SyntheticConfig(n_objects=6), seed=1)
    b = generate_synthetic(SyntheticConfig(n_objects=6), seed=2)
    assert a != b


def test_pseudo_embedding_contract():
    a = pseudo_embedding("mug", 300, 0)
    assert np.array_equal(a, pseudo_embedding("mug", 300, 0))
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    b = pseudo_embedding("pour", 300, 0)
    cos = float(a @ b)
    assert -1 < cos < 1 and not np.array_equal(a, b)
    assert not np.array_equal(a, pseudo_embedding("mug", 300, 1))
    with pytest.raises(ValueError):
        pseudo_embedding("mug", 0)


def test_pseudo_embedding_pinned_values():
    # FNV-1a("mug") = 0x... fixed; guards against silent hash/pipeline drift
    from gcngrasp.dataset import fnv1a64

    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_load_embeddings(tmp_path):
    d = 4
    path = tmp_path / "emb.txt"
    path.write_text("2 4\npour 0.1 0.1 0.1 0.1\nfrying_pan 1 2 3 4\n")
    table = load_embeddings(path, ["pour", "frying_pan.n.01", "mug"], d)
    np.testing.assert_array_equal(table["pour"], [0.1] * 4)
    np.testing.assert_array_equal(table["frying_pan.n.01"], [1, 2, 3, 4])
    np.testing.assert_array_equal(table["mug"], pseudo_embedding("mug", d, 0))


def test_load_embeddings_bad_line(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("pour 0.1 0.1 0.1 0.1\nmug 0.1 0.1 0.1\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_embeddings(path, ["pour"], 4)


def test_lemma():
    assert lemma("frying_pan.n.01") == "frying_pan"
    assert lemma("pour") == "pour"
