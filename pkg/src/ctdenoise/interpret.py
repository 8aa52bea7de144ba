"""Anatomical-semantics visualization: cluster the denoiser's pre-output
features with seeded k-means and render the label map as an indexed PNG."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .esau import EsauNet
from .imaging import NormalizedImage

MAX_CLUSTERS = 16

# Fixed 16-color palette (RGB); label i renders as PALETTE[i].
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25),
    (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
    (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (128, 128, 128),
)


@dataclass
class LabelMap:
    """Per-pixel integer labels in [0, k)."""

    labels: np.ndarray
    k: int
    seed: int

    def __post_init__(self) -> None:
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")


@dataclass
class KMeansResult:
    label_map: LabelMap
    centroids: np.ndarray
    iterations: int
    within_cluster_sse: float
    sse_history: list[float]


def extract_features(net: EsauNet, img: NormalizedImage) -> np.ndarray:
    """The activation entering the final output projection, as (C, H, W)."""
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(img.values).to(dtype)[None, None]
    with torch.no_grad():
        feats = net.features(x)
    return feats[0].numpy()


def standardize_channels(features: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel so high-magnitude channels do not
    dominate the clustering distance; constant channels map to zero."""
    f = features.astype(np.float64)
    mean = f.mean(axis=(1, 2), keepdims=True)
    std = f.std(axis=(1, 2), keepdims=True)
    std[std == 0] = 1.0
    return (f - mean) / std


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[pick]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(features: np.ndarray, k: int, seed: int, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm over per-pixel feature vectors with k-means++
    seeding; stops when assignments stabilize or after max_iters.  Fully
    determined by (features, k, seed)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    c, h, w = features.shape
    n = h * w
    if k > n:
        raise ValueError(f"k={k} exceeds the pixel count {n}")
    points = features.reshape(c, n).T.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)

    labels: np.ndarray | None = None
    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            members = points[new_labels == j]
            if len(members):
                # empty clusters keep their previous centroid
                centroids[j] = members.mean(axis=0)
        history.append(_sse(points, centroids, new_labels))
        converged = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break

    lm = LabelMap(labels=labels.reshape(h, w), k=k, seed=seed)
    return KMeansResult(
        label_map=lm,
        centroids=centroids,
        iterations=iterations,
        within_cluster_sse=history[-1],
        sse_history=history,
    )


def render_label_map(lm: LabelMap, path: str | Path) -> None:
    """Write an indexed-color PNG using the fixed palette; deterministic
    bytes for identical label maps."""
    if lm.k > MAX_CLUSTERS:
        raise ValueError(f"at most {MAX_CLUSTERS} clusters are renderable, got k={lm.k}")
    img = Image.fromarray(lm.labels.astype(np.uint8), mode="P")
    flat = [v for rgb in PALETTE for v in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(Path(path), format="PNG")


def load_label_png(path: str | Path) -> np.ndarray:
    """Recover the label indices from a rendered label map."""
    with Image.open(Path(path)) as img:
        if img.mode != "P":
            raise ValueError(f"{path} is not an indexed-color image")
        return np.array(img, dtype=np.int32)


def cluster_features(net: EsauNet, img: NormalizedImage, k: int, seed: int,
                     max_iters: int = 100) -> KMeansResult:
    """Full pipeline: extract pre-output features, standardize per channel,
    cluster."""
    feats = standardize_channels(extract_features(net, img))
    return kmeans_cluster(feats, k, seed, max_iters)
