"""Landmark retrieval by exact nearest-neighbour search over embedding maps."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .volume_io import EmbeddingMap

__all__ = [
    "Query",
    "RetrievalResult",
    "nearest_index",
    "query_embedding",
    "nearest_voxel",
    "nearest_voxels",
    "radial_error",
    "mre",
    "export_center_embeddings",
    "evaluate_retrieval",
    "DETAIL_COLUMNS",
    "write_rows",
]

log = logging.getLogger(__name__)

DETAIL_COLUMNS = (
    "train_id", "test_id", "landmark", "kind",
    "retrieved_i", "retrieved_j", "retrieved_k",
    "retrieved_x_mm", "retrieved_y_mm", "retrieved_z_mm",
    "embedding_distance", "radial_error_mm",
)


@dataclass
class Query:
    embedding: np.ndarray
    volume_id: str = ""
    landmark: str = ""
    point_mm: np.ndarray | None = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("query embedding must be finite")


@dataclass
class RetrievalResult:
    index: tuple[int, int, int]
    point_mm: np.ndarray
    distance: float
    radial_error: float | None = None


def nearest_index(m: EmbeddingMap, point_mm) -> tuple[int, int, int]:
    """Voxel whose center is nearest to ``point_mm``; exact halves go to the lower index."""
    cont = m.mm_to_index(point_mm)
    n = np.asarray(m.shape)
    if np.any(cont < -0.5) or np.any(cont > n - 0.5):
        raise IndexError(f"point {tuple(np.round(point_mm, 3))} mm lies outside the map footprint")
    idx = np.clip(np.ceil(cont - 0.5).astype(int), 0, n - 1)
    return tuple(int(i) for i in idx)  # type: ignore[return-value]


def query_embedding(m: EmbeddingMap, point_mm) -> np.ndarray:
    i, j, k = nearest_index(m, point_mm)
    return m.data[:, i, j, k].astype(np.float64)


def nearest_voxels(m: EmbeddingMap, queries, block: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbours for a batch of queries.

    Returns (flat voxel indices, Euclidean distances). The map is streamed in
    blocks of ``block`` voxels (default: about 4M distances per block); ties
    resolve to the smallest flat (C-order) index, i.e. the lexicographically
    smallest voxel index.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    flat = m.data.reshape(3, -1)
    block = block or max(1024, (1 << 22) // max(1, len(q)))
    best_d = np.full(len(q), np.inf)
    best_i = np.zeros(len(q), dtype=np.int64)
    for start in range(0, flat.shape[1], block):
        e = flat[:, start:start + block].astype(np.float64)
        d2 = (e[0][None, :] - q[:, 0:1]) ** 2 + (e[1][None, :] - q[:, 1:2]) ** 2 + (e[2][None, :] - q[:, 2:3]) ** 2
        arg = np.argmin(d2, axis=1)
        val = d2[np.arange(len(q)), arg]
        better = val < best_d  # strict: earlier blocks win ties
        best_d[better] = val[better]
        best_i[better] = arg[better] + start
    return best_i, np.sqrt(best_d)


def nearest_voxel(m: EmbeddingMap, q: Query | np.ndarray, block: int | None = None) -> RetrievalResult:
    emb = q.embedding if isinstance(q, Query) else q
    flat_idx, dist = nearest_voxels(m, emb, block)
    idx = tuple(int(i) for i in np.unravel_index(int(flat_idx[0]), m.shape))
    return RetrievalResult(idx, m.index_to_mm(idx), float(dist[0]))  # type: ignore[arg-type]


def radial_error(result_mm, truth_mm) -> float:
    return float(np.linalg.norm(np.asarray(result_mm, dtype=float) - np.asarray(truth_mm, dtype=float)))


def mre(errors: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of radial errors."""
    errors = np.asarray(list(errors), dtype=float)
    if errors.size == 0:
        raise ValueError("mre of an empty error list")
    return float(errors.mean()), float(errors.std())


def export_center_embeddings(
    items: Iterable[tuple[str, EmbeddingMap, Mapping[str, np.ndarray | None]]],
    path=None,
) -> list[tuple[str, str, float, float, float]]:
    """Embeddings at organ centers, one row per (volume, organ).

    ``items`` yields (volume id, map, {organ: center mm or None}); missing
    centers are skipped with a warning. Writes a CSV when ``path`` is given.
    """
    rows = []
    for vid, m, centers in items:
        for organ, center in centers.items():
            if center is None:
                log.warning("volume %s: no center for %s, skipped", vid, organ)
                continue
            e = query_embedding(m, center)
            rows.append((vid, organ, float(e[0]), float(e[1]), float(e[2])))
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("volume_id", "organ", "e1", "e2", "e3"))
            w.writerows((vid, organ, repr(a), repr(b), repr(c)) for vid, organ, a, b, c in rows)
    return rows


def evaluate_retrieval(
    maps: Mapping[str, EmbeddingMap],
    landmarks: Mapping[str, Mapping[str, tuple[str, np.ndarray]]],
) -> tuple[list[dict], dict[str, tuple[float, float, int]]]:
    """Landmark retrieval over every ordered (train, test) pair of distinct volumes.

    ``landmarks[volume][name] = (kind, point_mm)``. Returns the detail rows
    and per-kind (MRE, std, count); kind ``"all"`` pools everything.
    """
    ids = sorted(maps)
    if len(ids) < 2:
        raise ValueError("retrieval evaluation needs at least two volumes")
    rows = []
    for test_id in ids:
        queries, meta = [], []
        for train_id in ids:
            if train_id == test_id:
                continue
            for name, (kind, point) in sorted(landmarks[train_id].items()):
                if name not in landmarks[test_id]:
                    continue
                queries.append(query_embedding(maps[train_id], point))
                meta.append((train_id, name, kind))
        if not queries:
            continue
        test_map = maps[test_id]
        flat_idx, dist = nearest_voxels(test_map, np.stack(queries))
        for (train_id, name, kind), fi, d in zip(meta, flat_idx, dist):
            idx = np.unravel_index(int(fi), test_map.shape)
            mm = test_map.index_to_mm(idx)
            err = radial_error(mm, landmarks[test_id][name][1])
            rows.append({
                "train_id": train_id, "test_id": test_id, "landmark": name, "kind": kind,
                "retrieved_i": int(idx[0]), "retrieved_j": int(idx[1]), "retrieved_k": int(idx[2]),
                "retrieved_x_mm": float(mm[0]), "retrieved_y_mm": float(mm[1]), "retrieved_z_mm": float(mm[2]),
                "embedding_distance": float(d), "radial_error_mm": err,
            })
    rows.sort(key=lambda r: (r["train_id"], r["test_id"], r["landmark"]))
    summary = {}
    for kind in sorted({r["kind"] for r in rows}) + ["all"]:
        errs = [r["radial_error_mm"] for r in rows if kind == "all" or r["kind"] == kind]
        mean, std = mre(errs) if errs else (math.nan, math.nan)
        summary[kind] = (mean, std, len(errs))
    return rows, summary


def write_rows(path, rows: list[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path
