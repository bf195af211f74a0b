"""Few-shot organ localization from retrieved edge points, plus box metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .retrieval import nearest_voxels, query_embedding
from .volume_io import EmbeddingMap, Volume

__all__ = [
    "Box",
    "VRResult",
    "ALPHA_GRID",
    "mask_box",
    "volume_bounds",
    "predict_box",
    "few_shot_box",
    "iou",
    "enlarge_box",
    "recall",
    "vr_at_99",
    "make_folds",
    "evaluate_localization",
]

ALPHA_GRID = tuple(round(1.0 + 0.05 * i, 2) for i in range(41))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in mm, bounds inclusive."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must be 3D")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min corner {lo} exceeds max corner {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_points(cls, points) -> "Box":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(tuple(points.min(axis=0)), tuple(points.max(axis=0)))

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2


@dataclass
class VRResult:
    alpha: float | None
    vr_mean: float
    vr_std: float
    recall: float  # mean recall at alpha, or the best achieved on the grid when alpha is None


def mask_box(mask: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> Box:
    """Box spanned by the centers of the mask voxels."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise ValueError("mask_box of an empty mask")
    sp, org = np.asarray(spacing, dtype=float), np.asarray(origin, dtype=float)
    return Box(tuple(org + idx.min(axis=0) * sp), tuple(org + idx.max(axis=0) * sp))


def volume_bounds(v: Volume) -> Box:
    """Physical footprint of the voxel grid."""
    sp = np.asarray(v.spacing)
    lo = np.asarray(v.origin) - sp / 2
    return Box(tuple(lo), tuple(lo + np.asarray(v.shape) * sp))


def predict_box(shot, m: EmbeddingMap) -> Box:
    """Box of the voxels retrieved for the six edge-point query embeddings of one shot."""
    flat_idx, _ = nearest_voxels(m, np.asarray(shot, dtype=np.float64).reshape(-1, 3))
    idx = np.stack(np.unravel_index(flat_idx, m.shape), axis=1)
    return Box.from_points(m.index_to_mm(idx))


def few_shot_box(shots: Sequence, m: EmbeddingMap) -> Box:
    """Corner-wise mean of the per-shot predicted boxes."""
    if len(shots) == 0:
        raise ValueError("few_shot_box needs at least one shot")
    boxes = [predict_box(s, m) for s in shots]
    return Box(tuple(np.mean([b.lo for b in boxes], axis=0)), tuple(np.mean([b.hi for b in boxes], axis=0)))


def iou(a: Box, b: Box) -> float:
    inter = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0, None)
    inter_vol = float(np.prod(inter))
    union = a.volume + b.volume - inter_vol
    if union <= 0:
        return 1.0 if a == b else 0.0
    return inter_vol / union


def enlarge_box(b: Box, alpha: float, bounds: Box) -> Box:
    """Scale every side by ``alpha`` about the center, then clip to ``bounds``."""
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    c = b.center
    half = (np.asarray(b.hi) - np.asarray(b.lo)) / 2 * alpha
    lo = np.clip(c - half, bounds.lo, bounds.hi)
    hi = np.clip(c + half, bounds.lo, bounds.hi)
    return Box(tuple(lo), tuple(hi))


def recall(b: Box, mask: np.ndarray, spacing, origin=(0.0, 0.0, 0.0)) -> float:
    """Fraction of mask voxel centers inside the box (inclusive)."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise ValueError("recall of an empty mask")
    pts = np.asarray(origin, dtype=float) + idx * np.asarray(spacing, dtype=float)
    inside = np.all((pts >= np.asarray(b.lo)) & (pts <= np.asarray(b.hi)), axis=1)
    return float(inside.mean())


def vr_at_99(
    predictions: Sequence[Box],
    masks: Sequence[np.ndarray],
    volumes: Sequence[Volume],
    alphas: Sequence[float] = ALPHA_GRID,
    target: float = 0.99,
) -> VRResult:
    """Smallest grid alpha whose enlarged boxes reach mean recall >= ``target``.

    VR per image is the physical volume of the raw image over the volume of
    the enlarged, clipped box; mean and population std are reported.
    """
    if not predictions or not (len(predictions) == len(masks) == len(volumes)):
        raise ValueError("need one prediction, mask and volume per test image")
    bounds = [volume_bounds(v) for v in volumes]
    best = -1.0
    for alpha in alphas:
        boxes = [enlarge_box(p, alpha, b) for p, b in zip(predictions, bounds)]
        r = float(np.mean([recall(bx, m, v.spacing, v.origin) for bx, m, v in zip(boxes, masks, volumes)]))
        best = max(best, r)
        if r >= target:
            vr = np.asarray([v.physical_volume() / bx.volume if bx.volume > 0 else math.inf
                             for bx, v in zip(boxes, volumes)])
            return VRResult(float(alpha), float(vr.mean()), float(vr.std()), r)
    return VRResult(None, math.nan, math.nan, best)


def make_folds(ids: Sequence[str], size: int, seed: int) -> list[list[str]]:
    """Disjoint folds of ``size`` ids after a seeded shuffle; leftovers are test-only."""
    if size < 1:
        raise ValueError("fold size must be >= 1")
    if size >= len(ids):
        raise ValueError(f"fold size {size} leaves no test images among {len(ids)} volumes")
    order = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(order))
    shuffled = [order[i] for i in perm]
    return [shuffled[i:i + size] for i in range(0, len(shuffled) - size + 1, size)]


def evaluate_localization(
    maps: Mapping[str, EmbeddingMap],
    edges: Mapping[str, Mapping[str, np.ndarray]],
    masks: Mapping[str, Mapping[str, np.ndarray]],
    volumes: Mapping[str, Volume],
    shots: int = 5,
    seed: int = 0,
) -> tuple[list[dict], list[dict]]:
    """Cross-validated few-shot localization.

    ``edges[vid][organ]`` holds the six edge points (mm) of each organ;
    ``volumes`` are the raw images (grid used for masks, bounds and VR).
    Each fold of ``shots`` volumes acts as the labelled set for every other
    volume. Returns (detail rows, per-organ report rows).
    """
    folds = make_folds(list(maps), shots, seed)
    organs = sorted({o for vid in edges for o in edges[vid]})
    detail, report = [], []
    for organ in organs:
        preds, gt_masks, vols, ious = [], [], [], []
        for f, fold in enumerate(folds):
            shot_sets = [np.stack([query_embedding(maps[t], p) for p in edges[t][organ]]) for t in fold
                         if organ in edges[t]]
            if not shot_sets:
                continue
            for vid in sorted(set(maps) - set(fold)):
                if organ not in masks[vid]:
                    continue
                box = few_shot_box(shot_sets, maps[vid])
                v = volumes[vid]
                gt = mask_box(masks[vid][organ], v.spacing, v.origin)
                score = iou(box, gt)
                preds.append(box)
                gt_masks.append(masks[vid][organ])
                vols.append(v)
                ious.append(score)
                detail.append({"organ": organ, "fold": f, "test_id": vid, "iou": score,
                               "lo_x": box.lo[0], "lo_y": box.lo[1], "lo_z": box.lo[2],
                               "hi_x": box.hi[0], "hi_y": box.hi[1], "hi_z": box.hi[2]})
        if not preds:
            continue
        vr = vr_at_99(preds, gt_masks, vols)
        report.append({"organ": organ, "iou_mean": float(np.mean(ious)), "iou_std": float(np.std(ious)),
                       "alpha": "none" if vr.alpha is None else vr.alpha, "recall": vr.recall,
                       "vr_mean": vr.vr_mean, "vr_std": vr.vr_std, "n": len(preds)})
    return detail, report
