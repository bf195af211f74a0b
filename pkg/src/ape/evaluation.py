"""Glue between phantoms, trained models and the retrieval/localization metrics."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch

from .model import APENet, intensity_to_input, sliding_window_embed
from .phantom import EDGE_NAMES, PhantomSample
from .sampler import SamplerConfig
from .train import batch_rng, make_batch
from .volume_io import EmbeddingMap, Volume, foreground_crop

__all__ = [
    "embed_volume",
    "landmark_table",
    "edge_table",
    "held_out_pair_distance",
    "seam_pairs",
    "seam_discontinuity",
    "cluster_separation",
]


def embed_volume(
    model: APENet,
    v: Volume,
    window: Sequence[int] = (32, 32, 24),
    overlap: float = 0.5,
    threshold: float | None = -500.0,
    batch_size: int = 4,
) -> EmbeddingMap:
    """Foreground-crop (unless ``threshold`` is None) and embed with blended sliding windows."""
    if threshold is not None:
        v = foreground_crop(v, threshold).volume
    return sliding_window_embed(model, v, window, overlap, batch_size)


def landmark_table(sample: PhantomSample, kinds: Sequence[str] = ("center", "edge")) -> dict:
    """{name: (kind, mm)} with names like ``liver/center`` and ``liver/x-``."""
    table = {}
    for organ, lm in sample.landmarks.items():
        if "center" in kinds:
            table[f"{organ}/center"] = ("center", lm.center)
        if "edge" in kinds:
            for name, p in zip(EDGE_NAMES, lm.edges):
                table[f"{organ}/{name}"] = ("edge", p)
    return table


def edge_table(sample: PhantomSample) -> dict:
    return {organ: lm.edges for organ, lm in sample.landmarks.items()}


def held_out_pair_distance(
    model: APENet,
    volumes: Sequence[Volume],
    scfg: SamplerConfig,
    n: int = 4,
    k: int = 250,
    seed: int = 12345,
    batches_per_volume: int = 1,
) -> float:
    """Mean eval-mode distance between the two embeddings of positive pairs.

    Pairs come from the augmented overlapping-patch sampler on the given
    (foreground-cropped) volumes.
    """
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    dists = []
    try:
        with torch.no_grad():
            for i, v in enumerate(volumes):
                for j in range(batches_per_volume):
                    batch = make_batch(v, batch_rng(seed, i * batches_per_volume + j, stream=2), "augm", scfg, n, k)
                    x = torch.as_tensor(intensity_to_input(batch.patches)[:, None], dtype=p.dtype)
                    out = model(x)
                    ia, ib = batch.index_a, batch.index_b
                    a = out[batch.patch_a, :, ia[:, 0], ia[:, 1], ia[:, 2]]
                    b = out[batch.patch_b, :, ib[:, 0], ib[:, 1], ib[:, 2]]
                    dists.append((a - b).norm(dim=1).double().numpy())
    finally:
        model.train(was_training)
    return float(np.concatenate(dists).mean())


def seam_pairs(shape: Sequence[int], window: Sequence[int]) -> list[tuple[int, np.ndarray]]:
    """(axis, indices) of voxels whose +1 neighbour along ``axis`` lies in the next tile."""
    out = []
    for axis, (n, w) in enumerate(zip(shape, window)):
        idx = np.arange(w - 1, n - 1, w)
        if len(idx):
            out.append((axis, idx))
    return out


def seam_discontinuity(m: EmbeddingMap, window: Sequence[int]) -> float:
    """Median embedding jump across the boundaries of a non-overlapping tiling."""
    jumps = []
    for axis, idx in seam_pairs(m.shape, window):
        lo = np.take(m.data, idx, axis=axis + 1)
        hi = np.take(m.data, idx + 1, axis=axis + 1)
        jumps.append(np.linalg.norm(hi - lo, axis=0).ravel())
    if not jumps:
        raise ValueError("the tiling has no seams inside this map")
    return float(np.median(np.concatenate(jumps)))


def cluster_separation(rows: Sequence[tuple[str, str, float, float, float]]) -> tuple[float, float]:
    """(mean distance between organ centroids, mean distance of points to their organ centroid)."""
    by_organ: Mapping[str, list] = {}
    for _, organ, *e in rows:
        by_organ.setdefault(organ, []).append(e)
    centroids, spreads = [], []
    for organ in sorted(by_organ):
        pts = np.asarray(by_organ[organ])
        c = pts.mean(axis=0)
        centroids.append(c)
        spreads.append(np.linalg.norm(pts - c, axis=1).mean())
    centroids = np.asarray(centroids)
    if len(centroids) < 2:
        raise ValueError("need at least two organs")
    d = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
    inter = d[np.triu_indices(len(centroids), 1)].mean()
    return float(inter), float(np.mean(spreads))
