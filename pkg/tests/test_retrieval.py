import csv
import itertools
import logging
import math

import numpy as np
import pytest

from ape.retrieval import (
    DETAIL_COLUMNS,
    Query,
    evaluate_retrieval,
    export_center_embeddings,
    mre,
    nearest_index,
    nearest_voxel,
    nearest_voxels,
    query_embedding,
    radial_error,
    write_rows,
)
from ape.volume_io import EmbeddingMap


def _map(rng, shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return EmbeddingMap(rng.normal(size=(3, *shape)), spacing, origin)


def brute_force(m, q):
    best, best_idx = math.inf, None
    h, w, d = m.shape
    for i in range(h):
        for j in range(w):
            for k in range(d):
                e = m.data[:, i, j, k].astype(np.float64)
                dist = (e[0] - q[0]) ** 2 + (e[1] - q[1]) ** 2 + (e[2] - q[2]) ** 2
                if dist < best:
                    best, best_idx = dist, (i, j, k)
    return best_idx, math.sqrt(best)


def test_query_embedding_examples(rng):
    m = _map(rng, spacing=(2, 2, 3), origin=(10, -4, 1.5))
    assert np.array_equal(query_embedding(m, m.index_to_mm((3, 5, 2))), m.data[:, 3, 5, 2])
    m0 = _map(rng)
    assert np.array_equal(query_embedding(m0, (0, 0, 0)), m0.data[:, 0, 0, 0])
    with pytest.raises(IndexError):
        query_embedding(m0, (-0.6, 0, 0))


def test_nearest_index_matches_mm_oracle(rng):
    m = _map(rng, shape=(6, 7, 5), spacing=(1.5, 0.8, 3.0), origin=(-2, 3, 0))
    centers = np.array([m.index_to_mm(i) for i in np.ndindex(m.shape)])
    lo, hi = centers.min(0), centers.max(0)
    for p in rng.uniform(lo, hi, size=(100, 3)):
        d = np.linalg.norm(centers - p, axis=1)
        assert nearest_index(m, p) == np.unravel_index(int(np.argmin(d)), m.shape)


def test_halfway_points_round_to_lower_index(rng):
    m = _map(rng)
    assert nearest_index(m, (0.5, 1.5, 2.5)) == (0, 1, 2)


def test_self_query_returns_voxel(rng):
    m = _map(rng)
    r = nearest_voxel(m, Query(m.data[:, 2, 7, 4]))
    assert r.index == (2, 7, 4) and r.distance == 0
    assert np.array_equal(r.point_mm, m.index_to_mm((2, 7, 4)))


def test_constant_map_ties_to_origin_voxel():
    m = EmbeddingMap(np.ones((3, 4, 4, 4)), (1, 1, 1))
    assert nearest_voxel(m, np.zeros(3)).index == (0, 0, 0)


@pytest.mark.parametrize("block", [None, 1, 7, 64, 513])
def test_exhaustive_search_matches_brute_force(block, rng):
    for _ in range(10):
        # coarse values force many exact ties
        m = EmbeddingMap(rng.integers(-2, 3, size=(3, 8, 8, 8)).astype(np.float32) * 0.5, (1, 1, 1))
        qs = np.concatenate([rng.integers(-2, 3, size=(5, 3)) * 0.5, rng.normal(size=(5, 3))])
        flat, dist = nearest_voxels(m, qs, block)
        for q, f, d in zip(qs, flat, dist):
            idx, bd = brute_force(m, q)
            assert np.unravel_index(int(f), m.shape) == idx
            assert d == pytest.approx(bd, abs=1e-12)


def test_radial_error_and_mre():
    assert radial_error((1, 2, 3), (1, 2, 3)) == 0
    assert radial_error((0, 0, 0), (3, 4, 0)) == 5
    mean, std = mre([1, 2, 3])
    assert mean == 2 and std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    with pytest.raises(ValueError):
        mre([])


def test_query_rejects_non_finite():
    with pytest.raises(ValueError):
        Query([0, float("nan"), 1])


def test_export_centers(tmp_path, rng, caplog):
    maps = {"a": _map(rng), "b": EmbeddingMap(np.full((3, 8, 8, 8), 0.25), (1, 1, 1))}
    centers = {f"organ{i}": rng.uniform(0, 7, 3) for i in range(8)}
    rows = export_center_embeddings(((vid, m, centers) for vid, m in maps.items()), tmp_path / "c.csv")
    assert len(rows) == 16
    assert {r[2:] for r in rows if r[0] == "b"} == {(0.25, 0.25, 0.25)}
    with open(tmp_path / "c.csv", newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == ["volume_id", "organ", "e1", "e2", "e3"] and len(table) == 17
    with caplog.at_level(logging.WARNING):
        rows = export_center_embeddings([("a", maps["a"], {"x": None, "y": (1, 1, 1)})])
    assert len(rows) == 1 and "x" in caplog.text


def _landmarks(rng, n_vol, names=("l1", "l2", "l3")):
    return {f"v{i}": {name: ("center" if name != "l3" else "edge", rng.uniform(0, 7, 3)) for name in names}
            for i in range(n_vol)}


def test_evaluation_cardinality_and_report(tmp_path, rng):
    maps = {f"v{i}": _map(rng) for i in range(4)}
    lms = _landmarks(rng, 4)
    rows, summary = evaluate_retrieval(maps, lms)
    assert len(rows) == 4 * 3 * 3
    pairs = {(r["train_id"], r["test_id"]) for r in rows}
    assert pairs == set(itertools.permutations(maps, 2))
    write_rows(tmp_path / "d.csv", rows, DETAIL_COLUMNS)
    with open(tmp_path / "d.csv", newline="") as f:
        detail = list(csv.DictReader(f))
    # re-aggregate from the CSV
    for kind in ("center", "edge", "all"):
        errs = [float(r["radial_error_mm"]) for r in detail if kind == "all" or r["kind"] == kind]
        assert summary[kind] == (pytest.approx(np.mean(errs), abs=1e-12), pytest.approx(np.std(errs), abs=1e-12),
                                 len(errs))
    for r in rows:  # each row is an oracle retrieval
        q = query_embedding(maps[r["train_id"]], lms[r["train_id"]][r["landmark"]][1])
        idx, _ = brute_force(maps[r["test_id"]], q)
        assert (r["retrieved_i"], r["retrieved_j"], r["retrieved_k"]) == idx


def test_perfect_retriever_has_zero_error(rng):
    m = _map(rng)
    shared = {name: (kind, m.index_to_mm(rng.integers(0, 8, 3))) for name, kind in [("a", "center"), ("b", "edge")]}
    _, summary = evaluate_retrieval({"x": m, "y": m}, {"x": shared, "y": shared})
    assert summary["all"][0] == 0


def test_single_volume_is_rejected(rng):
    with pytest.raises(ValueError):
        evaluate_retrieval({"v0": _map(rng)}, _landmarks(rng, 1))
