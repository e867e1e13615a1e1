"""GCNGrasp scorer, the SGN baselines, the random baseline and checkpoints.

Both learned models expose ``forward_batch(plans, plan_index, classes,
tasks)``: ``plans`` are distinct fused-cloud geometry plans, ``plan_index``
maps every scored item to its plan, and ``classes`` / ``tasks`` name the
object class and goal task of each item. An item's score never depends on
the other items in the batch: every item gets its own grasp-augmented graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataset import Ontology, load_embeddings, pseudo_embedding
from .encoders import (
    DESK_ENCODER,
    PAPER_ENCODER,
    EncoderConfig,
    GeometryPlan,
    SetAbstractionConfig,
    check_weights,
    encode_plans,
    init_encoder_weights,
    plan_geometry,
)
from .knowledge_graph import (
    KnowledgeGraph,
    _canonical,
    attach_grasp_node,
    build_graph,
    init_node_features,
)
from .pointcloud import FusedCloud
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    hidden: int  # K
    layers: int  # L
    target_n: int  # points kept per object after preprocessing
    variant: str = "full"
    include_instances: bool = False
    embedding_seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("the GCN needs at least one layer")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")

    @property
    def embed_dim(self) -> int:
        return self.encoder.out_dim

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["encoder"] = encoder_to_json(self.encoder)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelConfig":
        doc = dict(doc)
        doc["encoder"] = encoder_from_json(doc["encoder"])
        return cls(**doc)


def encoder_to_json(cfg: EncoderConfig) -> dict:
    return {
        "layers": [[layer.samples, layer.k, list(layer.mlp_widths)] for layer in cfg.layers],
        "head_widths": list(cfg.head_widths),
        "in_features": cfg.in_features,
    }


def encoder_from_json(doc: Mapping) -> EncoderConfig:
    layers = tuple(SetAbstractionConfig(s, k, tuple(w)) for s, k, w in doc["layers"])
    return EncoderConfig(layers, tuple(doc["head_widths"]), doc.get("in_features", 1))


PRESETS = {
    "paper": ModelConfig(PAPER_ENCODER, hidden=128, layers=6, target_n=4096),
    "desk": ModelConfig(DESK_ENCODER, hidden=64, layers=3, target_n=256),
}


def gcn_layer(h, a_hat, w) -> Tensor:
    """ReLU(Â H W) for one graph (2-D) or a batch of graphs (3-D)."""
    h, a_hat, w = T.as_tensor(h), T.as_tensor(a_hat), T.as_tensor(w)
    if a_hat.shape[-1] != a_hat.shape[-2] or a_hat.shape[-1] != h.shape[-2]:
        raise ValueError(f"gcn_layer: Â {a_hat.shape} does not match H {h.shape}")
    if w.ndim != 2 or w.shape[0] != h.shape[-1]:
        raise ValueError(f"gcn_layer: W {w.shape} does not match H {h.shape}")
    return T.relu(T.matmul(T.matmul(a_hat, h), w))


def _he(rng, fan_in, fan_out):
    return Tensor(rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), requires_grad=True)


def _evaluator_weights(rng, fan_in: int, k: int, prefix: str) -> dict[str, Tensor]:
    out = {}
    for j, (a, b) in enumerate([(fan_in, k), (k, k), (k, 1)]):
        out[f"{prefix}.w{j}"] = _he(rng, a, b)
        out[f"{prefix}.b{j}"] = Tensor(np.zeros(b), requires_grad=True)
    return out


def _evaluate(z: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    """ReLU, ReLU, linear-to-scalar, sigmoid -> (B,)."""
    for j in range(3):
        z = T.matmul(z, weights[f"{prefix}.w{j}"]) + weights[f"{prefix}.b{j}"]
        if j < 2:
            z = T.relu(z)
    return T.sigmoid(T.reshape(z, (z.shape[0],)))


def model_graph(ontology: Ontology, variant: str = "full", include_instances: bool = False) -> KnowledgeGraph:
    """Ablation graph plus every task node, so each goal task has a row to mark.

    In the ``wordnet_only`` variant the task nodes come back without edges:
    the goal indicator then has no path to the grasp node.
    """
    g = build_graph(ontology, variant, include_instances)
    missing = [t for t in ontology.tasks if ("task", t) not in g]
    if not missing:
        return g
    edges = [(g.nodes[i], g.nodes[j]) for i, j in g.edges]
    return _canonical(list(g.nodes) + [("task", t) for t in missing], edges, g.variant)


def node_embeddings(graph: KnowledgeGraph, dim: int, path=None, seed: int = 0) -> np.ndarray:
    """(|V|, dim) table aligned with ``graph.nodes``; pseudo vectors where no file entry exists."""
    tokens = [t for _, t in graph.nodes]
    table = load_embeddings(path, tokens, dim, seed) if path else {t: pseudo_embedding(t, dim, seed) for t in tokens}
    return np.stack([table[t] for t in tokens]) if tokens else np.zeros((0, dim))


class GcnGraspModel:
    kind = "gcn"

    def __init__(self, config: ModelConfig, graph: KnowledgeGraph, embeddings: np.ndarray, weights: dict[str, Tensor]):
        if any(k == "grasp" for k, _ in graph.nodes):
            raise ValueError("the base graph must not contain grasp nodes")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (len(graph), config.embed_dim):
            raise ValueError(f"embeddings {embeddings.shape} do not match graph/config ({len(graph)}, {config.embed_dim})")
        self.config = config
        self.graph = graph
        self.embeddings = embeddings
        self.weights = weights
        check_weights(config.encoder, weights)
        for name, shape in self.gcn_shapes().items():
            if name not in weights or weights[name].shape != shape:
                raise ValueError(f"weight {name!r} missing or not of shape {shape}")
        self._anchor_cache: dict[tuple, tuple[np.ndarray, int]] = {}
        self._base = None

    def gcn_shapes(self) -> dict[str, tuple[int, ...]]:
        d, k = self.config.embed_dim, self.config.hidden
        shapes = {f"gcn.w{l}": ((d + 1) if l == 0 else k, k) for l in range(self.config.layers)}
        for j, (a, b) in enumerate([(k, k), (k, k), (k, 1)]):
            shapes[f"eval.w{j}"] = (a, b)
            shapes[f"eval.b{j}"] = (b,)
        return shapes

    @classmethod
    def create(cls, config: ModelConfig, ontology: Ontology, seed: int = 0, embeddings_path=None) -> "GcnGraspModel":
        graph = model_graph(ontology, config.variant, config.include_instances)
        emb = node_embeddings(graph, config.embed_dim, embeddings_path, config.embedding_seed)
        rng = np.random.default_rng(seed)
        weights = init_encoder_weights(config.encoder, rng)
        d, k = config.embed_dim, config.hidden
        for l in range(config.layers):
            weights[f"gcn.w{l}"] = _he(rng, (d + 1) if l == 0 else k, k)
        weights.update(_evaluator_weights(rng, k, k, "eval"))
        return cls(config, graph, emb, weights)

    def parameters(self) -> list[Tensor]:
        return [self.weights[n] for n in sorted(self.weights)]

    def _anchor(self, cls_token: str):
        if cls_token not in self._anchor_cache:
            g = attach_grasp_node(self.graph, ("class", cls_token))
            gi = g.index(("grasp", "grasp"))
            a = g.normalized_adjacency.copy()
            a.setflags(write=False)
            self._anchor_cache[cls_token] = (a, gi)
        return self._anchor_cache[cls_token]

    def _base_features(self) -> tuple[np.ndarray, int]:
        """Node features with a zero grasp row and no goal mark; grasp row index."""
        if self._base is None:
            g = attach_grasp_node(self.graph, next(n for n in self.graph.nodes if n[0] == "class"))
            emb = {t: self.embeddings[i] for i, (_, t) in enumerate(self.graph.nodes)}
            goal = next(n for n in g.nodes if n[0] == "task")
            x = init_node_features(g, emb, np.zeros(self.config.embed_dim), goal)
            x[:, -1] = 0.0
            self._base = (x, g.index(("grasp", "grasp")), g)
        return self._base

    def forward_batch(self, plans: Sequence[GeometryPlan], plan_index, classes: Sequence[str], tasks: Sequence[str]) -> Tensor:
        if len(classes) != len(tasks) or len(classes) != len(plan_index):
            raise ValueError("classes, tasks and plan_index must align")
        base, gi, g = self._base_features()
        b = len(classes)
        a_hat = np.empty((b, len(g), len(g)))
        x = np.repeat(base[None], b, axis=0)
        for i, (c, t) in enumerate(zip(classes, tasks)):
            if ("class", c) not in self.graph:
                raise KeyError(f"anchor class {c!r} is not in the graph")
            if ("task", t) not in self.graph:
                raise KeyError(f"goal task {t!r} is not in the graph")
            a, agi = self._anchor(c)
            assert agi == gi
            a_hat[i] = a
            x[i, g.index(("task", t)), -1] = 1.0

        emb = encode_plans(plans, self.weights)
        idx = np.asarray(plan_index, dtype=np.int64)
        if not (len(idx) == len(plans) and np.array_equal(idx, np.arange(len(plans)))):
            emb = T.take(emb, idx)
        grasp_rows = T.reshape(T.concat([emb, Tensor(np.zeros((b, 1)))], axis=1), (b, 1, -1))
        h = T.concat([Tensor(x[:, :gi]), grasp_rows, Tensor(x[:, gi + 1:])], axis=1)
        a_t = Tensor(a_hat)
        for l in range(self.config.layers):
            h = gcn_layer(h, a_t, self.weights[f"gcn.w{l}"])
        z = T.reshape(T.take(h, (slice(None), gi)), (b, self.config.hidden))
        return _evaluate(z, self.weights, "eval")


class SgnModel:
    """Shape embedding concatenated with task and class embeddings, then an MLP."""

    kind = "sgn"

    def __init__(self, config: ModelConfig, tasks: Sequence[str], classes: Sequence[str], weights: dict[str, Tensor], pretrained: bool):
        self.config = config
        self.tasks = list(tasks)
        self.classes = list(classes)
        self.weights = weights
        self.pretrained = pretrained
        check_weights(config.encoder, weights)
        d = config.embed_dim
        if weights["sgn.task_table"].shape != (len(self.tasks), d) or weights["sgn.class_table"].shape != (len(self.classes), d):
            raise ValueError("embedding tables must be (n_tokens, D) with the encoder's D")
        if pretrained:
            for name in ("sgn.task_table", "sgn.class_table"):
                weights[name].requires_grad = False
        self._task_ix = {t: i for i, t in enumerate(self.tasks)}
        self._class_ix = {c: i for i, c in enumerate(self.classes)}

    @classmethod
    def create(cls, config: ModelConfig, ontology: Ontology, seed: int = 0, pretrained: bool = False, embeddings_path=None) -> "SgnModel":
        rng = np.random.default_rng(seed)
        d, k = config.embed_dim, config.hidden
        weights = init_encoder_weights(config.encoder, rng)
        tasks, classes = sorted(ontology.tasks), sorted(ontology.classes)
        if pretrained:
            table = load_embeddings(embeddings_path, tasks + classes, d, config.embedding_seed) if embeddings_path else {
                t: pseudo_embedding(t, d, config.embedding_seed) for t in tasks + classes
            }
            tt = np.stack([table[t] for t in tasks])
            ct = np.stack([table[c] for c in classes])
        else:
            tt = rng.normal(scale=1.0 / np.sqrt(d), size=(len(tasks), d))
            ct = rng.normal(scale=1.0 / np.sqrt(d), size=(len(classes), d))
        weights["sgn.task_table"] = Tensor(tt, requires_grad=not pretrained)
        weights["sgn.class_table"] = Tensor(ct, requires_grad=not pretrained)
        weights.update(_evaluator_weights(rng, 3 * d, k, "mlp"))
        return cls(config, tasks, classes, weights, pretrained)

    def parameters(self) -> list[Tensor]:
        return [self.weights[n] for n in sorted(self.weights) if self.weights[n].requires_grad]

    def forward_batch(self, plans: Sequence[GeometryPlan], plan_index, classes: Sequence[str], tasks: Sequence[str]) -> Tensor:
        try:
            ti = np.array([self._task_ix[t] for t in tasks], dtype=np.int64)
            ci = np.array([self._class_ix[c] for c in classes], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} has no embedding row") from None
        emb = encode_plans(plans, self.weights)
        idx = np.asarray(plan_index, dtype=np.int64)
        if not (len(idx) == len(plans) and np.array_equal(idx, np.arange(len(plans)))):
            emb = T.take(emb, idx)
        x = T.concat([emb, T.take(self.weights["sgn.task_table"], ti), T.take(self.weights["sgn.class_table"], ci)], axis=1)
        return _evaluate(x, self.weights, "mlp")


def gcn_forward(model: GcnGraspModel, graph: KnowledgeGraph | None, fused: FusedCloud, anchor_class, goal_task) -> float:
    """Score of one grasp for one task. ``graph`` (if given) must be the model's base graph."""
    if graph is not None and (graph.nodes != model.graph.nodes or graph.edges != model.graph.edges):
        raise ValueError("graph differs from the graph the model was built on")
    anchor_class, goal_task = tuple(anchor_class), tuple(goal_task)
    if anchor_class[0] != "class" or anchor_class not in model.graph:
        raise KeyError(f"anchor {anchor_class!r} is not a class node of the graph")
    if goal_task[0] != "task" or goal_task not in model.graph:
        raise KeyError(f"goal {goal_task!r} is not a task node of the graph")
    with T.no_grad():
        plan = plan_geometry(fused, model.config.encoder)
        return float(model.forward_batch([plan], [0], [anchor_class[1]], [goal_task[1]]).data[0])


def sgn_forward(model: SgnModel, fused: FusedCloud, class_token: str, task_token: str) -> float:
    with T.no_grad():
        plan = plan_geometry(fused, model.config.encoder)
        return float(model.forward_batch([plan], [0], [class_token], [task_token]).data[0])


def random_baseline(keys: Sequence[tuple], seed: int = 0) -> dict[tuple, float]:
    """I.i.d. Uniform(0, 1) score per key, drawn in the given key order."""
    draws = np.random.default_rng(seed).random(len(keys))
    return {tuple(k): float(s) for k, s in zip(keys, draws)}


# --- checkpoints -----------------------------------------------------------------

MAGIC = b"GCNGRASP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path) -> None:
    """Little-endian binary: magic, version, JSON config block, named f64 arrays."""
    meta = {"kind": model.kind, "config": model.config.to_json()}
    arrays = {name: t.data for name, t in model.weights.items()}
    if model.kind == "gcn":
        meta["graph"] = model.graph.to_json()
        arrays["node_embeddings"] = model.embeddings
    else:
        meta.update(tasks=model.tasks, classes=model.classes, pretrained=model.pretrained)
    block = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(block)), block, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (nd,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}Q", buf, pos)
        pos += 8 * nd
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after the last array")
    config = ModelConfig.from_json(meta["config"])
    if meta["kind"] == "gcn":
        emb = arrays.pop("node_embeddings")
        weights = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return GcnGraspModel(config, KnowledgeGraph.from_json(meta["graph"]), emb, weights)
    weights = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return SgnModel(config, meta["tasks"], meta["classes"], weights, meta["pretrained"])
