"""Loss terms and their sampling machinery: neighboring positive matching
with patch pooling, hard negative mining, the global alignment loss, the
local InfoNCE loss, the supervised pixel loss, and the weighted total.

Index selection always happens on the target stream and is reused verbatim
for the online stream; ties rank by row-major scan order so selections are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .metrics import ssim_torch

Coord = tuple[int, int]

DEFAULT_TAU = 0.07
DEFAULT_NEGATIVE_RADIUS = 7
DEFAULT_NEGATIVE_COUNT = 24
DEFAULT_NEGATIVE_POOL = 64
PATCH_SIZE = 16


@dataclass(frozen=True)
class PositiveSet:
    """A patch query and its selected neighbors (at most 4, all within the
    8-neighborhood, never the query itself)."""

    query: Coord
    positives: tuple[Coord, ...]

    def __post_init__(self) -> None:
        if len(self.positives) > 4:
            raise ValueError(f"at most 4 positives allowed, got {len(self.positives)}")
        qr, qc = self.query
        for r, c in self.positives:
            if max(abs(r - qr), abs(c - qc)) != 1:
                raise ValueError(f"positive {(r, c)} is not an 8-neighbor of {self.query}")
        if self.query in self.positives:
            raise ValueError("query may not be its own positive")


@dataclass(frozen=True)
class NegativeSet:
    """A pixel query and its mined negatives, all at Chebyshev distance in
    [1, radius]."""

    query: Coord
    negatives: tuple[Coord, ...]
    radius: int

    def __post_init__(self) -> None:
        qr, qc = self.query
        for r, c in self.negatives:
            d = max(abs(r - qr), abs(c - qc))
            if not 1 <= d <= self.radius:
                raise ValueError(
                    f"negative {(r, c)} at Chebyshev distance {d} outside [1, {self.radius}]"
                )


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|); rejects zero vectors, where similarity is undefined."""
    va = torch.as_tensor(a, dtype=torch.float64).flatten()
    vb = torch.as_tensor(b, dtype=torch.float64).flatten()
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = va.norm(), vb.norm()
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float((va @ vb / (na * nb)).item())


def _cosines_to_columns(vec: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of one vector against each column of a (C, N) matrix."""
    vnorm = vec.norm()
    cnorms = cols.norm(dim=0)
    if vnorm.item() == 0.0 or (cnorms == 0).any().item():
        raise ValueError("cosine similarity is undefined for zero vectors")
    return (vec @ cols) / (vnorm * cnorms)


def neighbor_positive_match(
    features: torch.Tensor, query: Coord, max_positives: int = 4
) -> PositiveSet:
    """Pick the most similar patches among the query's in-bounds 8-neighbors.

    Similarity is cosine similarity on the given feature map (C, H, W); ties
    break toward earlier row-major scan order.  Fewer than ``max_positives``
    are returned when fewer neighbors are in bounds.
    """
    feats = features.detach()
    _, h, w = feats.shape
    r, c = query
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"query {query} outside the {h}x{w} patch grid")
    neighbors = [
        (r + dr, c + dc)
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
        if (dr, dc) != (0, 0) and 0 <= r + dr < h and 0 <= c + dc < w
    ]
    if not neighbors:
        raise ValueError(f"query {query} has no in-bounds neighbors")
    cols = feats[:, [p[0] for p in neighbors], [p[1] for p in neighbors]]
    sims = _cosines_to_columns(feats[:, r, c], cols)
    order = sorted(range(len(neighbors)), key=lambda j: (-float(sims[j]), j))
    chosen = tuple(neighbors[j] for j in order[:max_positives])
    return PositiveSet(query=query, positives=chosen)


def patch_aggregate(features: torch.Tensor, query: Coord, positives: Sequence[Coord]) -> torch.Tensor:
    """Mean of the query vector and its positive vectors (pooling over the
    patch dimension)."""
    if len(positives) == 0:
        raise ValueError("positive set is empty")
    coords = [query, *positives]
    rows = torch.tensor([p[0] for p in coords])
    cols = torch.tensor([p[1] for p in coords])
    return features[:, rows, cols].mean(dim=1)


def global_loss(
    online_fg: torch.Tensor,
    target_fg: torch.Tensor,
    online_projector: nn.Module,
    target_projector: nn.Module,
    predictor: nn.Module,
    queries: Sequence[Coord],
    positive_sets: Sequence[PositiveSet] | None = None,
) -> tuple[torch.Tensor, list[PositiveSet]]:
    """Patch-wise alignment loss between the normalized online prediction and
    the normalized target projection, summed over queries.

    Positive sets are selected on the target stream and applied identically
    to the online stream; pass ``positive_sets`` to reuse a prior selection.
    Gradients flow only through the online branch.  Each query contributes
    2 - 2 cos(prediction, target projection), in [0, 4].
    """
    tfg = target_fg.detach()
    if positive_sets is None:
        if len(queries) == 0:
            raise ValueError("query set is empty")
        sets = [neighbor_positive_match(tfg, q) for q in queries]
    else:
        sets = list(positive_sets)
        if not sets:
            raise ValueError("positive_sets is empty")

    g_target = torch.stack([patch_aggregate(tfg, s.query, s.positives) for s in sets])
    g_online = torch.stack([patch_aggregate(online_fg, s.query, s.positives) for s in sets])
    with torch.no_grad():
        z_target = target_projector(g_target)
    prediction = predictor(online_projector(g_online))

    z_norm = z_target.norm(dim=1, keepdim=True)
    p_norm = prediction.norm(dim=1, keepdim=True)
    if (z_norm == 0).any().item() or (p_norm == 0).any().item():
        raise ValueError("zero-norm projection; alignment loss is undefined")
    loss = ((prediction / p_norm - z_target / z_norm) ** 2).sum()
    return loss, sets


def hard_negative_sample(
    features: torch.Tensor,
    query: Coord,
    rng: np.random.Generator,
    radius: int = DEFAULT_NEGATIVE_RADIUS,
    count: int = DEFAULT_NEGATIVE_COUNT,
    pool_size: int = DEFAULT_NEGATIVE_POOL,
) -> NegativeSet:
    """Mine hard negatives for a pixel query.

    Candidates live at Chebyshev distance [1, radius] from the query; a
    random pool of at most ``pool_size`` candidates is drawn (seeded by the
    caller's rng), then the ``count`` most cosine-similar to the query's own
    target feature are kept.  Ties rank by row-major scan order.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    feats = features.detach()
    _, h, w = feats.shape
    r, c = query
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"query {query} outside the {h}x{w} grid")
    eligible = [
        (rr, cc)
        for rr in range(max(0, r - radius), min(h, r + radius + 1))
        for cc in range(max(0, c - radius), min(w, c + radius + 1))
        if (rr, cc) != (r, c)
    ]
    if not eligible:
        raise ValueError(f"no eligible negatives around {query}")
    if len(eligible) > pool_size:
        keep = np.sort(rng.choice(len(eligible), size=pool_size, replace=False))
        pool = [eligible[j] for j in keep]
    else:
        pool = eligible
    cols = feats[:, [p[0] for p in pool], [p[1] for p in pool]]
    sims = _cosines_to_columns(feats[:, r, c], cols)
    order = sorted(range(len(pool)), key=lambda j: (-float(sims[j]), j))
    chosen = tuple(pool[j] for j in order[: min(count, len(pool))])
    return NegativeSet(query=query, negatives=chosen, radius=radius)


def local_infonce(
    v_query: torch.Tensor,
    v_positive: torch.Tensor,
    v_negatives: torch.Tensor,
    tau: float = DEFAULT_TAU,
) -> torch.Tensor:
    """InfoNCE for one pixel query: -log of the positive's softmax weight
    among {positive, negatives}, logits scaled by 1/tau.  Zero negatives give
    exactly zero."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    pos = (v_query * v_positive).sum() / tau
    if v_negatives.numel() == 0:
        neg = pos.new_zeros((0,))
    else:
        neg = (v_negatives * v_query).sum(dim=-1) / tau
    logits = torch.cat([pos.view(1), neg])
    return torch.logsumexp(logits, dim=0) - pos


def local_contrastive_loss(
    online_fl: torch.Tensor,
    target_fl: torch.Tensor,
    embedder: nn.Module,
    queries: Sequence[Coord],
    rng: np.random.Generator | None = None,
    tau: float = DEFAULT_TAU,
    radius: int = DEFAULT_NEGATIVE_RADIUS,
    count: int = DEFAULT_NEGATIVE_COUNT,
    pool_size: int = DEFAULT_NEGATIVE_POOL,
    negative_sets: Sequence[NegativeSet] | None = None,
) -> tuple[torch.Tensor, list[NegativeSet]]:
    """Pixel-wise InfoNCE summed over queries.

    For each query pixel the online feature is the query, the target feature
    at the same location is the positive, and mined target features are the
    negatives; all pass through the shared two-layer embedder and are
    L2-normalized before the dot products.
    """
    tfl = target_fl.detach()
    if negative_sets is None:
        if len(queries) == 0:
            raise ValueError("query set is empty")
        if rng is None:
            raise ValueError("an rng is required to mine negatives")
        sets = [hard_negative_sample(tfl, q, rng, radius, count, pool_size) for q in queries]
    else:
        sets = list(negative_sets)
        if not sets:
            raise ValueError("negative_sets is empty")

    # one embedder call over every query, positive, and negative feature
    n = len(sets)
    q_rows = [s.query[0] for s in sets]
    q_cols = [s.query[1] for s in sets]
    neg_counts = [len(s.negatives) for s in sets]
    neg_rows = [p[0] for s in sets for p in s.negatives]
    neg_cols = [p[1] for s in sets for p in s.negatives]
    stacked = torch.cat(
        [
            online_fl[:, q_rows, q_cols].T,
            tfl[:, q_rows, q_cols].T,
            tfl[:, neg_rows, neg_cols].T,
        ]
    )
    embedded = embedder(stacked)
    norms = embedded.norm(dim=1, keepdim=True)
    if (norms == 0).any().item():
        raise ValueError("zero-norm local embedding")
    unit = embedded / norms
    u_query, u_positive, u_negatives = unit[:n], unit[n:2 * n], unit[2 * n:]

    total = online_fl.new_zeros(())
    offset = 0
    for i in range(n):
        j = neg_counts[i]
        total = total + local_infonce(u_query[i], u_positive[i], u_negatives[offset:offset + j], tau)
        offset += j
    return total, sets


def pixel_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Supervised term: mean squared error plus (1 - SSIM)."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    mse = ((prediction - target) ** 2).mean()
    return mse + (1.0 - ssim_torch(prediction, target))


def total_loss(l_global, l_local, l_pixel, lam: float = 10.0):
    """Weighted sum l_global + l_local + lam * l_pixel."""
    if lam < 0:
        raise ValueError(f"pixel-loss weight must be >= 0, got {lam}")
    return l_global + l_local + lam * l_pixel


# ---------------------------------------------------------------------------
# Query sampling
# ---------------------------------------------------------------------------

def pool_mask_to_patches(
    mask: np.ndarray, patch: int = PATCH_SIZE, min_fraction: float = 0.5
) -> np.ndarray:
    """Reduce a pixel mask to the patch grid: a patch is foreground when at
    least ``min_fraction`` of its pixels are."""
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} not divisible by patch size {patch}")
    blocks = mask.reshape(h // patch, patch, w // patch, patch)
    return blocks.mean(axis=(1, 3)) >= min_fraction


def _sample_from_mask(mask: np.ndarray, count: int, rng: np.random.Generator, what: str) -> list[Coord]:
    if count < 1:
        raise ValueError(f"query count must be >= 1, got {count}")
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise ValueError(f"no foreground {what} to sample queries from")
    if len(coords) > count:
        keep = np.sort(rng.choice(len(coords), size=count, replace=False))
        coords = coords[keep]
    return [(int(r), int(c)) for r, c in coords]


def sample_pixel_queries(mask: np.ndarray, count: int, rng: np.random.Generator) -> list[Coord]:
    """Uniform draw of foreground pixel coordinates, without replacement,
    capped at the foreground size."""
    return _sample_from_mask(np.asarray(mask, bool), count, rng, "pixels")


def sample_patch_queries(
    mask: np.ndarray, count: int, rng: np.random.Generator, patch: int = PATCH_SIZE
) -> list[Coord]:
    """Uniform draw of foreground patch-grid coordinates."""
    pooled = pool_mask_to_patches(np.asarray(mask, bool), patch)
    return _sample_from_mask(pooled, count, rng, "patches")


def dump_sample_sets(
    path: str | Path,
    positive_sets: Sequence[PositiveSet] = (),
    negative_sets: Sequence[NegativeSet] = (),
) -> None:
    """Write sampled index sets to a diagnostic text file, one query per
    line: kind, query coordinate, then the selected coordinates."""
    lines = []
    for s in positive_sets:
        pts = " ".join(f"{r},{c}" for r, c in s.positives)
        lines.append(f"P {s.query[0]},{s.query[1]} : {pts}")
    for s in negative_sets:
        pts = " ".join(f"{r},{c}" for r, c in s.negatives)
        lines.append(f"N {s.query[0]},{s.query[1]} : {pts}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
