"""Semantic graph over tasks, object classes and hypernym concepts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import Ontology

KINDS = ("class", "concept", "grasp", "instance", "task")
VARIANTS = ("full", "tasks_only", "wordnet_only")
GRASP_TOKEN = "grasp"
GRAPH_FORMAT = "gcngrasp.knowledge_graph"
GRAPH_VERSION = 1

NodeId = tuple  # (kind, token)


def normalize_adjacency(adj) -> np.ndarray:
    """Self-loop-augmented symmetric normalization D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    a_hat = a + np.eye(len(a))
    d = a_hat.sum(axis=1)
    return a_hat / np.sqrt(np.outer(d, d))


@dataclass(frozen=True)
class KnowledgeGraph:
    nodes: tuple[NodeId, ...]
    edges: frozenset[tuple[int, int]]
    variant: str = "full"

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-edge on {self.nodes[i]}")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.nodes)})
        n = len(self.nodes)
        adj = np.zeros((n, n))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        adj.setflags(write=False)
        norm = normalize_adjacency(adj)
        norm.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "normalized_adjacency", norm)

    def __len__(self):
        return len(self.nodes)

    def index(self, node: NodeId) -> int:
        try:
            return self._index[tuple(node)]
        except KeyError:
            raise KeyError(f"node {node!r} is not in the graph") from None

    def __contains__(self, node) -> bool:
        return tuple(node) in self._index

    def kind(self, i: int) -> str:
        return self.nodes[i][0]

    def degree(self, node: NodeId) -> int:
        return int(self.adjacency[self.index(node)].sum())

    def counts(self) -> dict:
        return {"nodes": len(self.nodes), "edges": len(self.edges)}

    def to_json(self) -> dict:
        named = sorted((min(i, j), max(i, j)) for i, j in self.edges)
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "variant": self.variant,
            "nodes": [{"kind": k, "token": t} for k, t in self.nodes],
            "edges": [list(e) for e in named],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "KnowledgeGraph":
        if doc.get("format") != GRAPH_FORMAT or doc.get("version") != GRAPH_VERSION:
            raise ValueError("not a version-1 knowledge graph document")
        nodes = tuple((n["kind"], n["token"]) for n in doc["nodes"])
        return cls(nodes, frozenset(tuple(e) for e in doc["edges"]), doc.get("variant", "full"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def _canonical(nodes, edges, variant) -> KnowledgeGraph:
    order = sorted(set(nodes), key=lambda n: (KINDS.index(n[0]), n[1]))
    index = {n: i for i, n in enumerate(order)}
    pairs = set()
    for a, b in edges:
        i, j = index[a], index[b]
        if i == j:
            raise ValueError(f"self-edge on {a}")
        pairs.add((min(i, j), max(i, j)))
    return KnowledgeGraph(tuple(order), frozenset(pairs), variant)


def build_graph(ontology: Ontology, variant: str = "full", include_instances: bool = False) -> KnowledgeGraph:
    """Graph of classes plus hypernym concepts (Is-A) and/or tasks (Used-For).

    ``tasks_only`` drops concepts and Is-A edges, ``wordnet_only`` drops tasks
    and Used-For edges. Node order is canonical (kind, then token), so any
    ordering of the ontology records yields the same graph.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown graph variant {variant!r}; expected one of {VARIANTS}")
    ontology.validate()
    nodes = [("class", c) for c in ontology.classes]
    edges = []
    if variant != "tasks_only":
        kind_of = {c: "class" for c in ontology.classes}
        kind_of.update({c: "concept" for c in ontology.concepts if c not in kind_of})
        nodes += [("concept", c) for c in ontology.concepts if kind_of[c] == "concept"]
        edges += [((kind_of[a], a), (kind_of[b], b)) for a, b in ontology.hypernym_edges]
    if variant != "wordnet_only":
        nodes += [("task", t) for t in ontology.tasks]
        edges += [(("class", c), ("task", t)) for c, t in ontology.used_for]
    if include_instances:
        nodes += [("instance", i) for i in ontology.instances]
        edges += [(("instance", i), ("class", c)) for i, c in ontology.instances.items()]
    return _canonical(nodes, edges, variant)


def attach_grasp_node(graph: KnowledgeGraph, anchor: NodeId, token: str = GRASP_TOKEN) -> KnowledgeGraph:
    """New graph with one grasp node linked to ``anchor``; ``graph`` is untouched."""
    anchor = tuple(anchor)
    if anchor not in graph:
        raise KeyError(f"anchor {anchor!r} is not in the graph")
    if anchor[0] not in ("class", "instance"):
        raise ValueError(f"grasp nodes attach to class or instance nodes, not {anchor[0]} {anchor[1]!r}")
    grasp = ("grasp", token)
    if grasp in graph:
        raise ValueError(f"graph already holds grasp node {token!r}")
    edges = [(graph.nodes[i], graph.nodes[j]) for i, j in graph.edges] + [(grasp, anchor)]
    return _canonical(list(graph.nodes) + [grasp], edges, graph.variant)


def detach_grasp_nodes(graph: KnowledgeGraph) -> KnowledgeGraph:
    keep = [n for n in graph.nodes if n[0] != "grasp"]
    edges = [
        (graph.nodes[i], graph.nodes[j])
        for i, j in graph.edges
        if graph.nodes[i][0] != "grasp" and graph.nodes[j][0] != "grasp"
    ]
    return _canonical(keep, edges, graph.variant)


def node_tokens(graph: KnowledgeGraph) -> list[str]:
    return [t for k, t in graph.nodes if k != "grasp"]


def init_node_features(
    graph: KnowledgeGraph,
    embeddings: Mapping[str, np.ndarray],
    grasp_embedding,
    goal_task: NodeId,
) -> np.ndarray:
    """|V| x (D+1) matrix: word embedding plus a goal-task indicator per row."""
    goal_task = tuple(goal_task)
    if goal_task not in graph or goal_task[0] != "task":
        raise ValueError(f"goal {goal_task!r} is not a task node of this graph")
    grasp_embedding = np.asarray(grasp_embedding, dtype=np.float64).reshape(-1)
    dim = len(grasp_embedding)
    x = np.zeros((len(graph), dim + 1))
    for i, (kind, token) in enumerate(graph.nodes):
        if kind == "grasp":
            x[i, :dim] = grasp_embedding
            continue
        if token not in embeddings:
            raise KeyError(f"no embedding for node token {token!r}")
        vec = np.asarray(embeddings[token], dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"embedding for {token!r} has shape {vec.shape}, expected ({dim},)")
        x[i, :dim] = vec
    x[graph.index(goal_task), dim] = 1.0
    return x


def ablation_counts(ontology: Ontology, include_instances: bool = False) -> dict[str, dict]:
    return {v: build_graph(ontology, v, include_instances).counts() for v in VARIANTS}
