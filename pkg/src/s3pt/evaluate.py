"""Clustering metrics, linear probing and segment-map export against synthetic ground truth."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .io import write_pgm, write_ppm
from .scenes import SceneConfig, View, generate_scene


def token_majority(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Most frequent label inside each patch (ties go to the smaller id), row-major."""
    rows, cols = grid
    h, w = mask.shape
    ph, pw = h // rows, w // cols
    patches = mask.reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3).reshape(rows * cols, ph * pw)
    size = int(patches.max()) + 1
    counts = (patches[:, :, None] == np.arange(size)).sum(axis=1)
    return counts.argmax(axis=1)


def contingency(true: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_ids, t_inv = np.unique(true, return_inverse=True)
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    table = np.zeros((len(t_ids), len(p_ids)), dtype=np.int64)
    np.add.at(table, (t_inv, p_inv), 1)
    return table, t_ids, p_ids


def purity(true, pred) -> float:
    table, _, _ = contingency(np.asarray(true), np.asarray(pred))
    return float(table.max(axis=0).sum() / table.sum())


def cluster_recall(true, pred) -> dict[int, float]:
    """Per ground-truth class: share of its tokens whose cluster is majority-labelled with it."""
    true, pred = np.asarray(true), np.asarray(pred)
    table, t_ids, p_ids = contingency(true, pred)
    majority = t_ids[table.argmax(axis=0)]
    mapped = majority[np.searchsorted(p_ids, pred)]
    return {int(c): float((mapped[true == c] == c).mean()) for c in t_ids}


def rare_classes(scene_cfg: SceneConfig) -> list[int]:
    """Object classes in the bottom frequency tercile."""
    freqs = scene_cfg.class_frequencies()
    order = np.argsort(freqs, kind="stable")
    n = max(1, int(np.ceil(len(freqs) / 3)))
    return sorted(int(k) + 1 for k in order[:n])


@dataclass
class MetricsReport:
    nmi: float = float("nan")
    purity: float = float("nan")
    ari: float = float("nan")
    class_recall: dict = field(default_factory=dict)
    rare_recall: dict = field(default_factory=dict)
    probe_iou: dict = field(default_factory=dict)
    probe_miou: float = float("nan")
    losses: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"nmi": self.nmi, "purity": self.purity, "ari": self.ari, "probe_miou": self.probe_miou}
        out.update({f"recall_{k}": v for k, v in self.class_recall.items()})
        out.update({f"iou_{k}": v for k, v in self.probe_iou.items()})
        return out


def clustering_metrics(true, pred) -> MetricsReport:
    true, pred = np.asarray(true), np.asarray(pred)
    return MetricsReport(
        nmi=float(normalized_mutual_info_score(true, pred)),
        purity=purity(true, pred),
        ari=float(adjusted_rand_score(true, pred)),
        class_recall=cluster_recall(true, pred),
    )


def full_view(pixels: np.ndarray, patch_size: int) -> View:
    h, w = pixels.shape[:2]
    return View(pixels, (0.0, 0.0, 1.0, 1.0), False, (h // patch_size, w // patch_size))


def scene_views(cfg, seeds, scale: tuple[float, float] = (1.0, 1.0)):
    """Full-image (default) views of held-out scenes, resized to the encoder input."""
    from .scenes import sample_views

    out = []
    for s in seeds:
        scene = generate_scene(cfg.scene, int(s))
        va, _ = sample_views(scene, scale[0], scale[1], int(s), cfg.encoder.view_size, cfg.encoder.patch_size, 0.0)
        out.append((scene, va))
    return out


@torch.no_grad()
def dense_features(network, views: list[View]) -> np.ndarray:
    """[N, P, d] frozen dense token features."""
    pixels = np.stack([v.pixels for v in views])
    _, dense = network.encode(pixels)
    return dense.numpy()


def evaluate_clustering(network, cfg, seeds) -> MetricsReport:
    """Teacher clustering of two views per held-out scene; token labels vs token-majority class."""
    from .train import cluster_pair, derive_seed, prepare_pair

    trues, preds = [], []
    offset = 0
    for s in seeds:
        sample = prepare_pair(cfg, int(s))
        feats = dense_features(network, [full_view(sample.pixels_a, cfg.encoder.patch_size), full_view(sample.pixels_b, cfg.encoder.patch_size)])
        assign = cluster_pair(cfg, sample, feats[0], feats[1], derive_seed(int(s), 99))
        trues.append(np.concatenate([sample.classes_a, sample.classes_b]))
        # keep cluster ids distinct across scenes
        preds.append(assign.labels + offset)
        offset += assign.num_clusters
    report = clustering_metrics(np.concatenate(trues), np.concatenate(preds))
    rare = set(rare_classes(cfg.scene))
    report.rare_recall = {k: v for k, v in report.class_recall.items() if k in rare}
    return report


def confusion(true, pred, num_classes: int) -> np.ndarray:
    table = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(table, (np.asarray(true), np.asarray(pred)), 1)
    return table


def iou_from_confusion(table: np.ndarray) -> dict[int, float]:
    """IoU per class that occurs in ground truth or prediction."""
    tp = np.diag(table)
    denom = table.sum(axis=0) + table.sum(axis=1) - tp
    return {int(c): float(tp[c] / denom[c]) for c in range(len(table)) if denom[c] > 0}


@dataclass
class ProbeResult:
    iou: dict
    miou: float
    weights: np.ndarray


def fit_linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    num_classes: int,
    steps: int = 2000,
    lr: float = 0.05,
    seed: int = 0,
) -> ProbeResult:
    """Softmax-regression probe trained full-batch with Adam; IoU on the test tokens."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(train_x, dtype=torch.float64)
    y = torch.as_tensor(train_y, dtype=torch.long)
    w = (torch.randn(x.shape[1], num_classes, generator=gen, dtype=torch.float64) * 0.01).requires_grad_()
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(x @ w + b, y).backward()
        opt.step()
    with torch.no_grad():
        pred = (torch.as_tensor(test_x, dtype=torch.float64) @ w + b).argmax(dim=1).numpy()
    iou = iou_from_confusion(confusion(test_y, pred, num_classes))
    return ProbeResult(iou, float(np.mean(list(iou.values()))), w.detach().numpy())


def probe_dataset(network, cfg, seeds) -> tuple[np.ndarray, np.ndarray]:
    pairs = scene_views(cfg, seeds)
    feats = dense_features(network, [v for _, v in pairs])
    labels = np.stack([token_majority(v.crop(s.class_mask), v.token_grid) for s, v in pairs])
    return feats.reshape(-1, feats.shape[-1]), labels.reshape(-1)


def network_hash(network) -> str:
    h = hashlib.sha256()
    for name, p in sorted(network.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def linear_probe(network, cfg, train_seeds, test_seeds, steps: int = 2000, lr: float = 0.05, seed: int = 0) -> ProbeResult:
    """Frozen-backbone probe; raises if the backbone changed during probing."""
    before = network_hash(network)
    tx, ty = probe_dataset(network, cfg, train_seeds)
    vx, vy = probe_dataset(network, cfg, test_seeds)
    result = fit_linear_probe(tx, ty, vx, vy, cfg.scene.num_classes, steps, lr, seed)
    if network_hash(network) != before:
        raise RuntimeError("backbone parameters changed during linear probing")
    return result


def export_segment_map(labels: np.ndarray, path, color: bool = False) -> Path:
    """8-bit PGM of label ids, or PPM through the fixed palette when ``color``."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label field must be 2-D")
    return write_ppm(path, labels) if color else write_pgm(path, labels)


def export_cluster_stats(assignment, path) -> Path:
    """Plain-text sidecar: cluster id, area (tokens), tokens in view A, tokens in view B."""
    lines = ["cluster area view_a view_b"]
    for k, (a, b) in enumerate(assignment.per_view_presence):
        lines.append(f"{k} {a + b} {a} {b}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
