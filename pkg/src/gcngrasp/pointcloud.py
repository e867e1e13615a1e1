"""Point-set geometry: normalization, FPS, augmentation and the gripper model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

# Parallel-jaw gripper in its own frame (meters), approach along +z.
CONTROL_POINTS = np.array(
    [
        [0.041, 0.0, 0.112],  # left fingertip
        [-0.041, 0.0, 0.112],  # right fingertip
        [0.041, 0.0, 0.066],  # left finger base
        [-0.041, 0.0, 0.066],  # right finger base
        [0.0, 0.0, 0.0],  # wrist
        [0.0, 0.0, 0.066],  # mid-palm
    ]
)
MID_PALM = 5
MIN_SURVIVORS = 16


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains NaN/Inf")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if len(self.features) != len(self.points):
                raise ValueError(f"{len(self.features)} feature rows for {len(self.points)} points")

    def __len__(self):
        return len(self.points)


@dataclass
class GraspPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("grasp rotation must be orthonormal with det +1")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("grasp translation must be finite")

    @classmethod
    def identity(cls) -> "GraspPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "GraspPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12, rtol=0):
            raise ValueError("pose matrix last row must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class FusedCloud:
    points: np.ndarray
    indicator: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.indicator = np.asarray(self.indicator, dtype=np.float64).reshape(-1)
        if len(self.indicator) != len(self.points):
            raise ValueError("indicator length must equal point count")
        if int(self.indicator.sum()) != len(CONTROL_POINTS):
            raise ValueError("a fused cloud carries exactly 6 gripper points")


@dataclass
class AugmentParams:
    rotation: bool = False
    jitter_sigma: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")

    @property
    def active(self) -> bool:
        return self.rotation or self.jitter_sigma > 0 or self.dropout_rate > 0


def _lex_first(features: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate with lexicographically smallest coordinates, then smallest index."""
    if len(candidates) == 1:
        return int(candidates[0])
    sub = features[candidates]
    order = np.lexsort(tuple(sub[:, j] for j in reversed(range(sub.shape[1]))))
    return int(candidates[order[0]])


def _greedy_k_center(features: np.ndarray, k: int, dist_to: Callable[[int], np.ndarray]) -> np.ndarray:
    n = len(features)
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} of {n} items")
    chosen = [_lex_first(features, np.arange(n))]
    mind = dist_to(chosen[0])
    for _ in range(1, k):
        far = mind.max()
        pick = _lex_first(features, np.flatnonzero(mind == far))
        chosen.append(pick)
        np.minimum(mind, dist_to(pick), out=mind)
    return np.array(chosen, dtype=np.int64)


def farthest_point_sample(points, k: int) -> np.ndarray:
    """Greedy k-center indices, seeded at the lexicographically smallest point.

    Ties between equally far candidates go to the lexicographically
    smaller point, then the smaller index, so the selected geometry does
    not depend on input order when points are distinct.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)

    def dist_to(i):
        d = pts - pts[i]
        return np.einsum("ij,ij->i", d, d)

    return _greedy_k_center(pts, k, dist_to)


def normalization(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    scale = float(np.sqrt(np.einsum("ij,ij->i", points - centroid, points - centroid).max()))
    return centroid, scale


def preprocess(cloud: PointCloud, target_n: int, return_transform: bool = False):
    """FPS-downsample to ``target_n`` points, then mean-center and unit-scale.

    With ``return_transform`` also returns ``(centroid, scale)`` so poses can
    be mapped into the same frame (``scale`` is 1 for a lone point at the
    centroid).
    """
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    pts, feats = cloud.points, cloud.features
    if len(pts) > target_n:
        keep = np.sort(farthest_point_sample(pts, target_n))
        pts = pts[keep]
        feats = None if feats is None else feats[keep]
    centroid, scale = normalization(pts)
    if scale == 0.0:
        scale = 1.0
    out = PointCloud((pts - centroid) / scale, None if feats is None else feats.copy())
    if return_transform:
        return out, (centroid, scale)
    return out


def normalize_pose(pose: GraspPose, centroid, scale: float) -> GraspPose:
    """Express a pose in the frame produced by :func:`preprocess`."""
    return GraspPose(pose.rotation, (pose.translation - np.asarray(centroid)) / scale)


def gripper_control_points(pose: GraspPose, scale: float = 1.0, canonical: np.ndarray = CONTROL_POINTS) -> np.ndarray:
    if not isinstance(pose, GraspPose):
        pose = GraspPose(*pose)
    return (canonical * scale) @ pose.rotation.T + pose.translation


def fuse_grasp_object(object_cloud: PointCloud, pose: GraspPose, gripper_scale: float = 1.0) -> FusedCloud:
    """Object points (indicator 0) followed by the 6 control points (indicator 1)."""
    grip = gripper_control_points(pose, gripper_scale)
    pts = np.concatenate([object_cloud.points, grip])
    ind = np.concatenate([np.zeros(len(object_cloud)), np.ones(len(grip))])
    return FusedCloud(pts, ind)


def augment(cloud, params: AugmentParams, seed: int):
    """Random rotation, Gaussian jitter and point dropout.

    Works on a PointCloud or a FusedCloud. For fused clouds the rotation is
    shared with the gripper points, while jitter and dropout only touch
    object points. Dropout never leaves fewer than 16 points.
    """
    if not params.active:
        return cloud
    rng = np.random.default_rng(seed)
    fused = isinstance(cloud, FusedCloud)
    pts = cloud.points.copy()
    obj = cloud.indicator == 0 if fused else np.ones(len(pts), dtype=bool)

    if params.rotation:
        rot = Rotation.random(random_state=rng).as_matrix()
        pts = pts @ rot.T
    if params.jitter_sigma > 0:
        noise = rng.normal(scale=params.jitter_sigma, size=pts.shape)
        pts = pts + noise * obj[:, None]

    keep = np.ones(len(pts), dtype=bool)
    if params.dropout_rate > 0:
        u = rng.random(len(pts))
        drop = (u < params.dropout_rate) & obj
        floor = min(MIN_SURVIVORS, int(obj.sum()))
        survivors = int((obj & ~drop).sum())
        if survivors < floor:
            # revive the dropped object points with the largest draws
            dropped = np.flatnonzero(drop)
            revive = dropped[np.argsort(-u[dropped], kind="stable")[: floor - survivors]]
            drop[revive] = False
        keep = ~drop

    if fused:
        return FusedCloud(pts[keep], cloud.indicator[keep])
    feats = None if cloud.features is None else cloud.features[keep]
    return PointCloud(pts[keep], feats)


def grasp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean Euclidean distance between corresponding control points."""
    return np.linalg.norm(a - b, axis=-1).mean(axis=-1)


def select_representative_grasps(grasps: Sequence[GraspPose], k: int) -> np.ndarray:
    """FPS over grasps using :func:`grasp_distance` between control-point sets."""
    if not 1 <= k <= len(grasps):
        raise ValueError(f"cannot select {k} of {len(grasps)} grasps")
    cps = np.stack([gripper_control_points(g) for g in grasps])
    flat = cps.reshape(len(cps), -1)
    return _greedy_k_center(flat, k, lambda i: grasp_distance(cps, cps[i]))
