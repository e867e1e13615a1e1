"""PointNet++-style set-abstraction encoder for fused grasp+object clouds.

Grouping geometry (FPS centroids, kNN neighbourhoods) depends only on the
input cloud, so it is computed once into a :class:`GeometryPlan`; the
learned part then runs batched over stacked plans.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from . import tensor as T
from .pointcloud import FusedCloud, farthest_point_sample
from .tensor import Tensor

Samples = Union[int, str]


@dataclass(frozen=True)
class SetAbstractionConfig:
    samples: Samples
    k: int
    mlp_widths: tuple[int, int, int]

    def __post_init__(self):
        if self.samples != "all" and (not isinstance(self.samples, int) or self.samples < 1):
            raise ValueError(f"samples must be a positive int or 'all', got {self.samples!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.mlp_widths) != 3:
            raise ValueError("a set-abstraction MLP has exactly three widths")


@dataclass(frozen=True)
class EncoderConfig:
    layers: tuple[SetAbstractionConfig, SetAbstractionConfig, SetAbstractionConfig]
    head_widths: tuple[int, int, int]
    in_features: int = 1

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValueError("the encoder has exactly three set-abstraction layers")
        if len(self.head_widths) != 3:
            raise ValueError("the encoder head has exactly three widths")
        if self.layers[-1].samples != "all":
            raise ValueError("the last set-abstraction layer must pool over all points")
        if any(layer.samples == "all" for layer in self.layers[:-1]):
            raise ValueError("only the last set-abstraction layer may use samples='all'")

    @property
    def out_dim(self) -> int:
        return self.head_widths[-1]


PAPER_ENCODER = EncoderConfig(
    layers=(
        SetAbstractionConfig(512, 32, (64, 64, 128)),
        SetAbstractionConfig(128, 32, (128, 128, 256)),
        SetAbstractionConfig("all", 32, (256, 512, 1024)),
    ),
    head_widths=(1024, 512, 300),
)

DESK_ENCODER = EncoderConfig(
    layers=(
        SetAbstractionConfig(64, 16, (16, 16, 32)),
        SetAbstractionConfig(16, 16, (32, 32, 64)),
        SetAbstractionConfig("all", 16, (64, 64, 128)),
    ),
    head_widths=(128, 64, 32),
)


def layer_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    feat = cfg.in_features
    for li, layer in enumerate(cfg.layers):
        fan_in = 3 + feat
        for j, width in enumerate(layer.mlp_widths):
            shapes[f"sa{li}.w{j}"] = (fan_in, width)
            shapes[f"sa{li}.b{j}"] = (width,)
            fan_in = width
        feat = layer.mlp_widths[-1]
    fan_in = feat
    for j, width in enumerate(cfg.head_widths):
        shapes[f"head.w{j}"] = (fan_in, width)
        shapes[f"head.b{j}"] = (width,)
        fan_in = width
    return shapes


def init_encoder_weights(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-normal weights, zero biases."""
    out = {}
    for name, shape in layer_shapes(cfg).items():
        if ".w" in name:
            out[name] = Tensor(rng.normal(scale=np.sqrt(2.0 / shape[0]), size=shape), requires_grad=True)
        else:
            out[name] = Tensor(np.zeros(shape), requires_grad=True)
    return out


def check_weights(cfg: EncoderConfig, weights: Mapping[str, Tensor]) -> None:
    for name, shape in layer_shapes(cfg).items():
        if name not in weights:
            raise ValueError(f"encoder weight {name!r} missing")
        if weights[name].shape != shape:
            raise ValueError(f"encoder weight {name!r} has shape {weights[name].shape}, config needs {shape}")


def _canonical_unique(points: np.ndarray, feats: np.ndarray | None):
    """Distinct rows in lexicographic order plus the first source index of each."""
    keys = points if feats is None else np.concatenate([points, feats.reshape(len(points), -1)], axis=1)
    _, first = np.unique(keys, axis=0, return_index=True)
    return first


def _group(points: np.ndarray, cfg: SetAbstractionConfig, first: np.ndarray):
    """Centroids, neighbour indices (into ``points``) and re-centred offsets."""
    upts = points[first]
    if cfg.samples == "all":
        return np.zeros((1, 3)), first[None, :], upts[None, :, :]
    if len(upts) < cfg.samples:
        raise ValueError(f"set abstraction needs {cfg.samples} distinct points, got {len(upts)}")
    centroids = upts[farthest_point_sample(upts, cfg.samples)]
    diff = upts[None, :, :] - centroids[:, None, :]
    d2 = np.einsum("skc,skc->sk", diff, diff)
    k = min(cfg.k, len(upts))
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    if k < cfg.k:
        # pad with the farthest kept neighbour; max-pooling ignores repeats
        nbr = np.concatenate([nbr, np.repeat(nbr[:, -1:], cfg.k - k, axis=1)], axis=1)
    return centroids, first[nbr], upts[nbr] - centroids[:, None, :]


@dataclass
class GeometryPlan:
    """Input-only quantities for one fused cloud under one encoder config."""

    first_input: np.ndarray  # (S1, k1, 3 + F) re-centred coords + input features
    second_neighbors: np.ndarray  # (S2, k2) indices into first-layer centroids
    second_offsets: np.ndarray  # (S2, k2, 3)
    third_offsets: np.ndarray  # (S2, 3) second-layer centroids relative to the origin


def plan_geometry(fused: FusedCloud, cfg: EncoderConfig) -> GeometryPlan:
    pts = fused.points
    feats = fused.indicator.reshape(-1, cfg.in_features)
    l1, l2, _ = cfg.layers
    c1, n1, off1 = _group(pts, l1, _canonical_unique(pts, feats))
    first_input = np.concatenate([off1, feats[n1]], axis=-1)
    c2, n2, off2 = _group(c1, l2, np.arange(len(c1)))
    return GeometryPlan(first_input, n2, off2, c2)


def _mlp(x: Tensor, weights: Mapping[str, Tensor], prefix: str, relu_last: bool = True) -> Tensor:
    for j in range(3):
        x = T.matmul(x, weights[f"{prefix}.w{j}"]) + weights[f"{prefix}.b{j}"]
        if j < 2 or relu_last:
            x = T.relu(x)
    return x


def encode_plans(plans: Sequence[GeometryPlan], weights: Mapping[str, Tensor]) -> Tensor:
    """Batched forward over precomputed plans -> (B, D) embeddings."""
    b = len(plans)
    x1 = Tensor(np.stack([p.first_input for p in plans]))
    f1 = T.max_pool_rows(_mlp(x1, weights, "sa0"), axis=2)  # (B, S1, C1)

    nbr = np.stack([p.second_neighbors for p in plans])
    gathered = f1[np.arange(b)[:, None, None], nbr]  # (B, S2, k2, C1)
    x2 = T.concat([Tensor(np.stack([p.second_offsets for p in plans])), gathered], axis=-1)
    f2 = T.max_pool_rows(_mlp(x2, weights, "sa1"), axis=2)  # (B, S2, C2)

    x3 = T.concat([Tensor(np.stack([p.third_offsets for p in plans])), f2], axis=-1)
    f3 = T.max_pool_rows(_mlp(x3, weights, "sa2"), axis=1)  # (B, C3)
    return _mlp(f3, weights, "head", relu_last=False)


def encode(fused: FusedCloud, cfg: EncoderConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Length-D embedding of one fused cloud."""
    check_weights(cfg, weights)
    return T.reshape(encode_plans([plan_geometry(fused, cfg)], weights), (cfg.out_dim,))


def set_abstraction(
    points: np.ndarray,
    features,
    cfg: SetAbstractionConfig,
    weights: Sequence[tuple[Tensor, Tensor]],
):
    """One set-abstraction layer on a single cloud.

    ``features`` is an (M, F) array or Tensor; ``weights`` holds the three
    (W, b) pairs of the shared per-point MLP. Returns ``(centroids, Tensor)``
    with one pooled feature row per centroid. Exact duplicate rows are
    grouped once, so duplicating the input leaves the output unchanged.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = T.as_tensor(features)
    centroids, nbr, offsets = _group(points, cfg, _canonical_unique(points, features.data))
    x = T.concat([Tensor(offsets), features[nbr]], axis=-1)
    for w, bias in weights:
        x = T.relu(T.matmul(x, w) + bias)
    return centroids, T.max_pool_rows(x, axis=1)
