"""On-disk data model, embeddings, and the synthetic tool dataset.

Layout of a dataset root::

    ontology.json            classes, concepts, hypernym_edges, tasks, used_for, instances
    objects/<id>/cloud.pts   "N" then N lines of "x y z" (meters)
    objects/<id>/grasps.json [{"grasp_id": ..., "pose": [16 floats, row-major 4x4]}]
    objects/<id>/labels.json {task: {grasp_id: 0|1}}
    embeddings.txt           optional "token v1 ... vD" table
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import MID_PALM, GraspPose, PointCloud, gripper_control_points


class DatasetError(ValueError):
    """Invalid or inconsistent dataset content; the message names the location."""


@dataclass
class Ontology:
    classes: list[str]
    concepts: list[str]
    hypernym_edges: list[tuple[str, str]]
    tasks: list[str]
    used_for: list[tuple[str, str]]
    instances: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.hypernym_edges = [tuple(e) for e in self.hypernym_edges]
        self.used_for = [tuple(e) for e in self.used_for]

    def validate(self, where: str = "ontology") -> None:
        known = set(self.classes) | set(self.concepts)
        tasks = set(self.tasks)
        for child, parent in self.hypernym_edges:
            for tok in (child, parent):
                if tok not in known:
                    raise DatasetError(f"{where}: hypernym edge endpoint {tok!r} is not declared")
        for cls, task in self.used_for:
            if cls not in self.classes:
                raise DatasetError(f"{where}: used_for class {cls!r} is not declared")
            if task not in tasks:
                raise DatasetError(f"{where}: used_for task {task!r} is not declared")
        for inst, cls in self.instances.items():
            if cls not in self.classes:
                raise DatasetError(f"{where}: instance {inst!r} maps to undeclared class {cls!r}")
        self._check_acyclic(where)

    def _check_acyclic(self, where: str) -> None:
        parents: dict[str, list[str]] = {}
        for child, parent in self.hypernym_edges:
            parents.setdefault(child, []).append(parent)
        state: dict[str, int] = {}
        for start in parents:
            stack = [(start, iter(parents.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(nxt) == 1:
                    raise DatasetError(f"{where}: cyclic Is-A relation through {nxt!r}")
                elif nxt not in state:
                    state[nxt] = 1
                    stack.append((nxt, iter(parents.get(nxt, ()))))

    def tasks_for(self, cls: str) -> list[str]:
        return sorted(t for c, t in self.used_for if c == cls)

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "concepts": list(self.concepts),
            "hypernym_edges": [list(e) for e in self.hypernym_edges],
            "tasks": list(self.tasks),
            "used_for": [list(e) for e in self.used_for],
            "instances": dict(sorted(self.instances.items())),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Ontology":
        try:
            return cls(
                classes=list(doc["classes"]),
                concepts=list(doc.get("concepts", [])),
                hypernym_edges=[tuple(e) for e in doc.get("hypernym_edges", [])],
                tasks=list(doc["tasks"]),
                used_for=[tuple(e) for e in doc.get("used_for", [])],
                instances=dict(doc.get("instances", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"ontology.json: malformed document ({exc})") from None


@dataclass
class LabeledGrasp:
    object_id: str
    grasp_id: str
    pose: GraspPose
    labels: dict[str, int] = field(default_factory=dict)


@dataclass(eq=False)
class Dataset:
    ontology: Ontology
    objects: dict[str, PointCloud]
    grasps: dict[str, list[LabeledGrasp]]

    def object_class(self, object_id: str) -> str:
        return self.ontology.instances[object_id]

    def samples(self):
        """Every labeled (object_id, grasp_id, task, label), in a stable order."""
        for oid in sorted(self.grasps):
            for g in self.grasps[oid]:
                for task in sorted(g.labels):
                    yield oid, g.grasp_id, task, g.labels[task]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.ontology != other.ontology or sorted(self.objects) != sorted(other.objects):
            return False
        for oid, cloud in self.objects.items():
            if not np.array_equal(cloud.points, other.objects[oid].points):
                return False
        if sorted(self.grasps) != sorted(other.grasps):
            return False
        for oid, gs in self.grasps.items():
            hs = other.grasps[oid]
            if len(gs) != len(hs):
                return False
            for a, b in zip(gs, hs):
                if (a.object_id, a.grasp_id, a.labels) != (b.object_id, b.grasp_id, b.labels):
                    return False
                if not np.array_equal(a.pose.to_matrix(), b.pose.to_matrix()):
                    return False
        return True


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"{path}: missing file") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None


def read_cloud(path: Path) -> PointCloud:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DatasetError(f"{path}: missing file") from None
    try:
        n = int(lines[0].strip())
    except (IndexError, ValueError):
        raise DatasetError(f"{path}:1: expected point count") from None
    if n < 1 or len(lines) < n + 1:
        raise DatasetError(f"{path}: header says {n} points, found {len(lines) - 1}")
    pts = np.empty((n, 3))
    for i in range(n):
        parts = lines[i + 1].split()
        try:
            if len(parts) != 3:
                raise ValueError
            pts[i] = [float(p) for p in parts]
        except ValueError:
            raise DatasetError(f"{path}:{i + 2}: malformed point {lines[i + 1]!r}") from None
    if not np.all(np.isfinite(pts)):
        raise DatasetError(f"{path}: non-finite coordinate")
    return PointCloud(pts)


def write_cloud(path: Path, cloud: PointCloud) -> None:
    rows = [str(len(cloud))] + [" ".join(repr(float(v)) for v in p) for p in cloud.points]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_dataset(root) -> Dataset:
    root = Path(root)
    ontology = Ontology.from_json(_read_json(root / "ontology.json"))
    ontology.validate(str(root / "ontology.json"))
    obj_dir = root / "objects"
    if not obj_dir.is_dir():
        raise DatasetError(f"{obj_dir}: missing objects directory")
    ids = sorted(p.name for p in obj_dir.iterdir() if p.is_dir())
    if not ids:
        raise DatasetError(f"{obj_dir}: no objects")

    objects, grasps = {}, {}
    for oid in ids:
        d = obj_dir / oid
        if oid not in ontology.instances:
            raise DatasetError(f"{d}: object {oid!r} has no class in ontology instances")
        valid = set(ontology.tasks_for(ontology.instances[oid]))
        objects[oid] = read_cloud(d / "cloud.pts")
        records = _read_json(d / "grasps.json")
        labels = _read_json(d / "labels.json") if (d / "labels.json").exists() else {}
        by_id: dict[str, LabeledGrasp] = {}
        for k, rec in enumerate(records):
            try:
                gid = str(rec["grasp_id"])
                pose = GraspPose.from_matrix(np.array(rec["pose"], dtype=float))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{d / 'grasps.json'}: record {k}: {exc}") from None
            if gid in by_id:
                raise DatasetError(f"{d / 'grasps.json'}: duplicate grasp_id {gid!r}")
            by_id[gid] = LabeledGrasp(oid, gid, pose)
        for task, table in labels.items():
            if task not in valid:
                raise DatasetError(f"{d / 'labels.json'}: task {task!r} is not valid for class {ontology.instances[oid]!r}")
            for gid, val in table.items():
                if gid not in by_id:
                    raise DatasetError(f"{d / 'labels.json'}: task {task!r} labels unknown grasp {gid!r}")
                if val not in (0, 1):
                    raise DatasetError(f"{d / 'labels.json'}: label {val!r} for {task}/{gid} is not 0/1")
                by_id[gid].labels[task] = int(val)
        grasps[oid] = list(by_id.values())
    return Dataset(ontology, objects, grasps)


def write_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "objects").mkdir(parents=True, exist_ok=True)
    _write_json(root / "ontology.json", dataset.ontology.to_json())
    for oid in sorted(dataset.objects):
        d = root / "objects" / oid
        d.mkdir(parents=True, exist_ok=True)
        write_cloud(d / "cloud.pts", dataset.objects[oid])
        gs = dataset.grasps.get(oid, [])
        _write_json(d / "grasps.json", [{"grasp_id": g.grasp_id, "pose": g.pose.to_matrix().reshape(-1).tolist()} for g in gs])
        labels: dict[str, dict[str, int]] = {}
        for g in gs:
            for task, val in sorted(g.labels.items()):
                labels.setdefault(task, {})[g.grasp_id] = val
        _write_json(d / "labels.json", dict(sorted(labels.items())))


def _write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")


# --- word embeddings ---------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def pseudo_embedding(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit-length Gaussian vector keyed by FNV-1a(token) XOR seed."""
    if dim < 1:
        raise ValueError("embedding dimension must be >= 1")
    key = fnv1a64(token.encode("utf-8")) ^ (seed & _MASK64)
    v = np.random.Generator(np.random.PCG64(key)).standard_normal(dim)
    return v / np.linalg.norm(v)


_SYNSET = re.compile(r"^(.+)\.[a-z]\.\d+$")


def lemma(token: str) -> str:
    """``frying_pan.n.01`` -> ``frying_pan``; other tokens pass through."""
    m = _SYNSET.match(token)
    return m.group(1) if m else token


def load_embeddings(path, vocab, dim: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Read a whitespace-separated vector table and resolve ``vocab`` against it.

    Synsets are looked up by lemma first, then verbatim; anything missing
    falls back to :func:`pseudo_embedding`. A leading ``count dim`` header
    line and ConceptNet-style ``/c/en/`` prefixes are accepted.
    """
    wanted = {lemma(t) for t in vocab} | set(vocab)
    table: dict[str, np.ndarray] = {}
    if path is not None and os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                if len(parts) != dim + 1:
                    raise DatasetError(f"{path}:{lineno}: expected {dim} values, found {len(parts) - 1}")
                tok = parts[0].removeprefix("/c/en/")
                if tok in wanted and tok not in table:
                    try:
                        table[tok] = np.array([float(x) for x in parts[1:]])
                    except ValueError:
                        raise DatasetError(f"{path}:{lineno}: malformed number") from None
    out = {}
    for tok in vocab:
        for key in (lemma(tok), tok):
            if key in table:
                out[tok] = table[key]
                break
        else:
            out[tok] = pseudo_embedding(tok, dim, seed)
    return out


# --- synthetic tools -----------------------------------------------------------

TASKS = ["flip", "handover", "hang", "pound", "pour", "scoop"]

FAMILIES = {
    "container": ["vessel.n.03", "container.n.01", "instrumentality.n.03", "entity.n.01"],
    "tool": ["implement.n.01", "instrumentality.n.03", "entity.n.01"],
}

# token, family, head primitive, valid tasks
CLASS_TEMPLATES = [
    ("ladle.n.01", "container", "disc", ["handover", "pour", "scoop"]),
    ("spatula.n.01", "tool", "box", ["flip", "handover", "pound", "scoop"]),
    ("saucepan.n.01", "container", "disc", ["flip", "handover", "pour", "scoop"]),
    ("hook.n.04", "tool", "hook", ["handover", "hang", "pound"]),
    ("measuring_cup.n.01", "container", "box", ["handover", "pour", "scoop"]),
    ("hammer.n.02", "tool", "box", ["flip", "handover", "pound"]),
]

FAR_FRACTION = 0.4


@dataclass
class SyntheticConfig:
    n_objects: int = 12
    n_classes: int = 6
    grasps_per_object: int = 20
    points_per_object: int = 256
    head_grasp_fraction: float = 0.5
    max_retries: int = 50


@dataclass
class _Tool:
    handle_length: float
    handle_radius: float
    head: str
    head_dims: tuple
    points: np.ndarray
    head_points: np.ndarray
    head_normals: np.ndarray


def _orthonormal_frame(approach: np.ndarray, closing_hint: np.ndarray) -> np.ndarray:
    z = approach / np.linalg.norm(approach)
    x = closing_hint - z * (closing_hint @ z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _make_tool(head: str, n_points: int, rng: np.random.Generator) -> _Tool:
    length = rng.uniform(0.10, 0.18)
    radius = rng.uniform(0.010, 0.016)

    if head == "disc":
        r, t = rng.uniform(0.04, 0.07), rng.uniform(0.02, 0.03)
        dims = (r, t)
    elif head == "box":
        dims = (rng.uniform(0.03, 0.06), rng.uniform(0.04, 0.08), rng.uniform(0.01, 0.04))
    elif head == "hook":
        dims = (rng.uniform(0.03, 0.05),)
    else:
        raise ValueError(f"unknown head primitive {head!r}")

    def sample_head(m):
        if head == "disc":
            r, t = dims
            c = np.array([length + r, 0.0, 0.0])
            side = rng.random(m) < (2 * np.pi * r * t) / (2 * np.pi * r * t + 2 * np.pi * r * r)
            ang = rng.uniform(0, 2 * np.pi, m)
            rad = np.where(side, r, r * np.sqrt(rng.random(m)))
            z = np.where(side, rng.uniform(-t / 2, t / 2, m), np.where(rng.random(m) < 0.5, -t / 2, t / 2))
            pts = c + np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)
            nrm = np.where(side[:, None], np.stack([np.cos(ang), np.sin(ang), 0 * ang], axis=1),
                           np.stack([0 * ang, 0 * ang, np.sign(z)], axis=1))
            return pts, nrm
        if head == "box":
            a, b, c = dims
            lo = np.array([length, -b / 2, -c / 2])
            size = np.array([a, b, c])
            areas = np.array([b * c, a * c, a * b])
            axis = rng.choice(3, size=m, p=areas / areas.sum())
            sign = np.where(rng.random(m) < 0.5, 0.0, 1.0)
            u = rng.random((m, 3))
            u[np.arange(m), axis] = sign
            nrm = np.zeros((m, 3))
            nrm[np.arange(m), axis] = 2 * sign - 1
            return lo + u * size, nrm
        (big_r,) = dims
        theta = rng.uniform(-np.pi / 2, np.pi / 2, m)
        psi = rng.uniform(0, 2 * np.pi, m)
        radial = np.stack([np.cos(theta), np.sin(theta), 0 * theta], axis=1)
        centre = np.array([length, big_r, 0.0]) + big_r * radial
        nrm = np.cos(psi)[:, None] * radial + np.sin(psi)[:, None] * np.array([0.0, 0.0, 1.0])
        return centre + radius * nrm, nrm

    n_handle = n_points // 2
    x = rng.uniform(0, length, n_handle)
    ang = rng.uniform(0, 2 * np.pi, n_handle)
    handle = np.stack([x, radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    head_pts, _ = sample_head(n_points - n_handle)
    dense_head, dense_normals = sample_head(400)
    return _Tool(length, radius, head, dims, np.concatenate([handle, head_pts]), dense_head, dense_normals)


def _handle_grasp(tool: _Tool, rng) -> GraspPose:
    x = rng.uniform(0.03, 0.97) * tool.handle_length
    phi = rng.uniform(0, 2 * np.pi)
    outward = np.array([0.0, np.cos(phi), np.sin(phi)])
    rot = _orthonormal_frame(-outward, np.cross(-outward, [1.0, 0.0, 0.0]))
    centre = np.array([x, 0.0, 0.0])
    return GraspPose(rot, centre - rot @ np.array([0.0, 0.0, 0.089]))


def _head_grasp(tool: _Tool, rng) -> GraspPose:
    i = rng.integers(len(tool.head_points))
    p, n = tool.head_points[i], tool.head_normals[i]
    hint = rng.normal(size=3)
    rot = _orthonormal_frame(-n, hint)
    return GraspPose(rot, p - rot @ np.array([0.0, 0.0, 0.1]))


def grasp_region(tool: _Tool, pose: GraspPose) -> tuple[str, float]:
    """Which part the mid-palm point is nearest to, and its offset along the handle."""
    palm = gripper_control_points(pose)[MID_PALM]
    x = float(np.clip(palm[0], 0.0, tool.handle_length))
    d_handle = np.linalg.norm(palm - np.array([x, 0.0, 0.0])) - tool.handle_radius
    d_head = np.linalg.norm(tool.head_points - palm, axis=1).min()
    return ("handle" if d_handle <= d_head else "head"), float(palm[0])


def label_grasp(task: str, family: str, tool: _Tool, pose: GraspPose) -> int:
    part, x = grasp_region(tool, pose)
    if task == "handover":
        return 1
    if task in ("pound", "scoop", "flip"):
        return int(part == "handle" and tool.handle_length - x >= FAR_FRACTION * tool.handle_length)
    if task == "pour":
        return int(part == "handle" and family == "container")
    if task == "hang":
        return int(part == "head" and tool.head == "hook")
    raise ValueError(f"no labeling rule for task {task!r}")


def synthetic_ontology(n_classes: int) -> Ontology:
    templates = CLASS_TEMPLATES[:n_classes]
    classes = sorted(t[0] for t in templates)
    edges, concepts = set(), set()
    for token, family, _, _ in templates:
        chain = [token] + FAMILIES[family]
        concepts.update(FAMILIES[family])
        edges.update(zip(chain[:-1], chain[1:]))
    used_for = sorted((t[0], task) for t in templates for task in t[3])
    tasks = sorted({task for _, task in used_for})
    return Ontology(classes, sorted(concepts), sorted(edges), tasks, used_for, {})


def generate_synthetic(config: SyntheticConfig | None = None, seed: int = 0) -> Dataset:
    """Procedural handle+head tools with rule-derived task labels.

    Each object must end up with at least two tasks that have both positive
    and negative grasps; objects are re-drawn (bounded) until that holds.
    """
    cfg = config or SyntheticConfig()
    if cfg.n_classes < 2 or cfg.n_classes > len(CLASS_TEMPLATES):
        raise ValueError(f"n_classes must be in [2, {len(CLASS_TEMPLATES)}]")
    if cfg.n_objects < cfg.n_classes:
        raise ValueError("n_objects must be >= n_classes")
    ontology = synthetic_ontology(cfg.n_classes)
    templates = {t[0]: t for t in CLASS_TEMPLATES[: cfg.n_classes]}
    root_rng = np.random.default_rng(seed)

    objects, grasps = {}, {}
    order = [CLASS_TEMPLATES[i % cfg.n_classes][0] for i in range(cfg.n_objects)]
    counts: dict[str, int] = {}
    for cls in order:
        _, family, head, tasks = templates[cls]
        oid = f"{lemma(cls)}_{counts.get(cls, 0)}"
        counts[cls] = counts.get(cls, 0) + 1
        for _ in range(cfg.max_retries):
            rng = np.random.default_rng(root_rng.integers(2**63))
            tool = _make_tool(head, cfg.points_per_object, rng)
            n_head = int(round(cfg.head_grasp_fraction * cfg.grasps_per_object))
            poses = [_head_grasp(tool, rng) for _ in range(n_head)]
            poses += [_handle_grasp(tool, rng) for _ in range(cfg.grasps_per_object - n_head)]
            labeled = [
                LabeledGrasp(oid, str(i), p, {t: label_grasp(t, family, tool, p) for t in tasks})
                for i, p in enumerate(poses)
            ]
            mixed = sum(1 for t in tasks if 0 < sum(g.labels[t] for g in labeled) < len(labeled))
            if mixed >= 2:
                break
        else:
            raise RuntimeError(f"could not generate a valid {cls} object in {cfg.max_retries} tries")
        objects[oid] = PointCloud(tool.points)
        grasps[oid] = labeled
        ontology.instances[oid] = cls
    ontology.validate()
    return Dataset(ontology, objects, grasps)
