"""Joint-view spatial clustering of dense tokens via entropic optimal transport."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .depth import TokenDepths, depth_cost


@dataclass
class TokenField:
    features: np.ndarray  # [P, d], unit rows
    positions: np.ndarray  # [P, 2] source-image (x, y) in [0, 1]
    depths: np.ndarray  # [P] meters
    view_id: str = "A"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if isinstance(self.depths, TokenDepths):
            self.depths = self.depths.values
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        n = len(self.features)
        if len(self.positions) != n or len(self.depths) != n:
            raise ValueError("features, positions and depths must have one row per token")
        if np.abs(np.linalg.norm(self.features, axis=1) - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("token features must be L2-normalized")
        if (self.positions < 0).any() or (self.positions > 1).any():
            raise ValueError("token positions must lie in [0, 1]^2")
        if self.view_id not in ("A", "B"):
            raise ValueError(f"view_id must be 'A' or 'B', got {self.view_id!r}")

    def __len__(self):
        return len(self.features)


@dataclass
class TransportPlan:
    plan: np.ndarray
    lam: float
    iterations: int


@dataclass(frozen=True)
class ClusteringParams:
    num_clusters: int = 16
    lam: float = 20.0
    sk_iterations: int = 1
    pos_alpha: float = 1.0
    depth_beta: float = 4.0
    outer_rounds: int = 3
    seed: int = 0
    depth_scale: float = 48.0

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.sk_iterations < 1 or self.outer_rounds < 1:
            raise ValueError("sk_iterations and outer_rounds must be >= 1")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # [2P]
    centroids: np.ndarray  # [M, d]
    centroid_positions: np.ndarray  # [M, 2]
    centroid_depths: np.ndarray  # [M]
    per_view_presence: np.ndarray  # [M, 2] token counts in view A, view B
    num_a: int
    plan: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    def view_labels(self, view_id: str) -> np.ndarray:
        return self.labels[: self.num_a] if view_id == "A" else self.labels[self.num_a :]

    def spanning_clusters(self) -> np.ndarray:
        """Cluster ids with at least one token in each view."""
        return np.flatnonzero((self.per_view_presence[:, 0] > 0) & (self.per_view_presence[:, 1] > 0))


@dataclass
class ObjectReps:
    reps: np.ndarray | torch.Tensor  # [M', d]
    cluster_ids: np.ndarray  # [M']

    def __len__(self):
        return len(self.cluster_ids)

    def lookup(self, cluster_id: int) -> int:
        return int(np.flatnonzero(self.cluster_ids == cluster_id)[0])


def feature_position_cost(features, positions, centroids, centroid_positions, pos_alpha: float = 1.0) -> np.ndarray:
    """(1 - <f_i, c_j>) + pos_alpha * ||p_i - q_j||."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64)
    q = np.asarray(centroid_positions, dtype=np.float64)
    cos = 1.0 - f @ c.T
    dist = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
    return cos + pos_alpha * dist


def sinkhorn_transport(cost, lam: float = 20.0, iterations: int = 1) -> TransportPlan:
    """Entropic OT with uniform marginals; each iteration is a column then a row scaling.

    The plan always ends row-normalized to 1/N, so every token is fully assigned
    even when a single iteration leaves cluster sizes unbalanced.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n, m = cost.shape
    q = np.exp(-lam * (cost - cost.min(axis=1, keepdims=True)))
    if (q.sum(axis=1) == 0).any():
        raise ValueError("stabilized kernel underflowed to an all-zero row")
    for _ in range(iterations):
        col = q.sum(axis=0, keepdims=True)
        q = q * np.divide(1.0 / m, col, out=np.zeros_like(col), where=col > 0)
        q = q * ((1.0 / n) / q.sum(axis=1, keepdims=True))
    return TransportPlan(q, lam, iterations)


def _pairwise_cost(features, positions, depths, pos_alpha, depth_beta, depth_scale, idx):
    f, p, d = features, positions, depths
    cost = feature_position_cost(f, p, f[idx], p[idx], pos_alpha)
    return cost + depth_beta * depth_cost(d, d[idx], depth_scale)


def farthest_point_init(features, positions, depths, params: ClusteringParams) -> np.ndarray:
    """Seeded farthest-point sampling under the transport cost metric.

    The first point maximizes a seeded random projection of the features, which
    keeps the choice independent of token order.
    """
    rng = np.random.default_rng(params.seed)
    direction = rng.normal(size=features.shape[1])
    chosen = [int(np.argmax(features @ direction))]
    dmin = _pairwise_cost(features, positions, depths, params.pos_alpha, params.depth_beta, params.depth_scale, chosen)[:, 0]
    for _ in range(1, params.num_clusters):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        new = _pairwise_cost(features, positions, depths, params.pos_alpha, params.depth_beta, params.depth_scale, [nxt])[:, 0]
        dmin = np.minimum(dmin, new)
    return np.asarray(chosen)


def cluster_joint_views(view_a: TokenField, view_b: TokenField, params: ClusteringParams) -> ClusterAssignment:
    feats = np.concatenate([view_a.features, view_b.features])
    pos = np.concatenate([view_a.positions, view_b.positions])
    dep = np.concatenate([view_a.depths, view_b.depths])
    n = len(feats)
    m = params.num_clusters
    if m > n:
        raise ValueError(f"num_clusters {m} exceeds the {n} joint tokens")

    seeds = farthest_point_init(feats, pos, dep, params)
    centroids, c_pos, c_dep = feats[seeds].copy(), pos[seeds].copy(), dep[seeds].copy()
    plan = None
    for _ in range(params.outer_rounds):
        cost = feature_position_cost(feats, pos, centroids, c_pos, params.pos_alpha)
        if params.depth_beta:
            cost = cost + params.depth_beta * depth_cost(dep, c_dep, params.depth_scale)
        plan = sinkhorn_transport(cost, params.lam, params.sk_iterations).plan
        mass = plan.sum(axis=0)
        live = mass > 0
        w = plan[:, live] / mass[live]
        means = w.T @ feats
        norms = np.linalg.norm(means, axis=1)
        ok = norms > 1e-12
        upd = np.flatnonzero(live)[ok]
        centroids[upd] = means[ok] / norms[ok, None]
        c_pos[np.flatnonzero(live)] = w.T @ pos
        c_dep[np.flatnonzero(live)] = w.T @ dep

    labels = plan.argmax(axis=1)
    na = len(view_a)
    presence = np.stack(
        [np.bincount(labels[:na], minlength=m), np.bincount(labels[na:], minlength=m)], axis=1
    )
    return ClusterAssignment(labels, centroids, c_pos, c_dep, presence, na, plan)


def merge_assignments(assignments: list[ClusterAssignment]) -> ClusterAssignment:
    """Stack per-image assignments into one whose cluster ids are offset per image.

    View-A tokens of every image come first, then view-B tokens, matching a
    batch laid out as [all A views; all B views].
    """
    offsets = np.cumsum([0] + [a.num_clusters for a in assignments[:-1]])
    la = [a.view_labels("A") + o for a, o in zip(assignments, offsets)]
    lb = [a.view_labels("B") + o for a, o in zip(assignments, offsets)]
    return ClusterAssignment(
        labels=np.concatenate(la + lb),
        centroids=np.concatenate([a.centroids for a in assignments]),
        centroid_positions=np.concatenate([a.centroid_positions for a in assignments]),
        centroid_depths=np.concatenate([a.centroid_depths for a in assignments]),
        per_view_presence=np.concatenate([a.per_view_presence for a in assignments]),
        num_a=sum(len(x) for x in la),
    )


def pool_features(features, labels, num_clusters: int, eps: float = 1e-8) -> ObjectReps:
    """L2-normalized per-cluster mean of features; works on numpy arrays and torch tensors.

    Clusters with no member, or whose mean has norm below ``eps``, are dropped.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    ids = ids[ids < num_clusters]
    if isinstance(features, torch.Tensor):
        onehot = torch.as_tensor(labels[None, :] == ids[:, None], dtype=features.dtype)
        means = (onehot @ features) / onehot.sum(dim=1, keepdim=True)
        norms = means.norm(dim=1)
        keep = (norms > eps).numpy()
        reps = means[torch.as_tensor(keep)] / norms[torch.as_tensor(keep)][:, None]
    else:
        features = np.asarray(features, dtype=np.float64)
        means = np.stack([features[labels == k].mean(axis=0) for k in ids]) if len(ids) else np.zeros((0, features.shape[1]))
        norms = np.linalg.norm(means, axis=1)
        keep = norms > eps
        reps = means[keep] / norms[keep, None]
    return ObjectReps(reps, ids[keep])


def pool_objects(view: TokenField, assignment: ClusterAssignment) -> ObjectReps:
    labels = assignment.view_labels(view.view_id)
    if len(labels) != len(view):
        raise ValueError("assignment labels do not cover this view's tokens")
    return pool_features(view.features, labels, assignment.num_clusters)
