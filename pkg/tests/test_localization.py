import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ape.localization import (
    ALPHA_GRID,
    Box,
    enlarge_box,
    evaluate_localization,
    few_shot_box,
    iou,
    make_folds,
    mask_box,
    predict_box,
    recall,
    volume_bounds,
    vr_at_99,
)
from ape.retrieval import nearest_voxel
from ape.volume_io import EmbeddingMap, Volume

UNIT = Box((0, 0, 0), (1, 1, 1))


def test_box_invariants():
    with pytest.raises(ValueError):
        Box((0, 0, 1), (1, 1, 0))
    assert Box((1, 2, 3), (1, 2, 3)).volume == 0
    assert Box.from_points([(1, 5, 2), (3, 0, 2), (2, 2, 7)]) == Box((1, 0, 2), (3, 5, 7))


def test_iou_examples():
    assert iou(UNIT, UNIT) == 1
    assert iou(UNIT, Box((2, 2, 2), (3, 3, 3))) == 0
    assert iou(UNIT, Box((0.5, 0, 0), (1.5, 1, 1))) == pytest.approx(1 / 3, abs=1e-15)
    p = Box((1, 1, 1), (1, 1, 1))
    assert iou(p, p) == 1 and iou(p, Box((2, 2, 2), (2, 2, 2))) == 0


boxes = st.tuples(*[st.floats(-10, 10)] * 3, *[st.floats(0, 5)] * 3).map(
    lambda t: Box(t[:3], tuple(a + b for a, b in zip(t[:3], t[3:]))))


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0 <= iou(a, b) <= 1
    assert iou(a, a) == 1


def test_enlarge_examples():
    bounds = Box((-100, -100, -100), (100, 100, 100))
    assert enlarge_box(UNIT, 1.0, bounds) == UNIT
    c = Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    assert enlarge_box(c, 2.0, bounds) == Box((-1, -1, -1), (1, 1, 1))
    tight = Box((0, 0, 0), (10, 10, 10))
    near = Box((8, 4, 4), (9.5, 6, 6))
    e = enlarge_box(near, 3.0, tight)
    # by hand: center (8.75, 5, 5), half-sides (2.25, 3, 3) -> (6.5, 2, 2)-(11, 8, 8), clipped at 10
    assert e == Box((6.5, 2, 2), (10, 8, 8))
    assert all(t_lo <= lo and hi <= t_hi for lo, hi, t_lo, t_hi in zip(e.lo, e.hi, tight.lo, tight.hi))
    with pytest.raises(ValueError):
        enlarge_box(UNIT, 0.9, bounds)


def test_recall_examples():
    mask = np.zeros((4, 4, 4), bool)
    mask[1, 1, 1] = mask[2, 1, 1] = True
    assert recall(Box((-1, -1, -1), (4, 4, 4)), mask, (1, 1, 1)) == 1
    assert recall(Box((3, 3, 3), (4, 4, 4)), mask, (1, 1, 1)) == 0
    assert recall(Box((0.5, 0.5, 0.5), (1.5, 1.5, 1.5)), mask, (1, 1, 1)) == 0.5
    assert recall(Box((1, 1, 1), (1, 1, 1)), mask, (1, 1, 1)) == 0.5  # inclusive bounds
    with pytest.raises(ValueError):
        recall(UNIT, np.zeros((2, 2, 2), bool), (1, 1, 1))


@settings(max_examples=60, deadline=None)
@given(boxes, st.floats(1, 3), st.floats(1, 3), st.integers(0, 2**31 - 1))
def test_recall_grows_with_alpha(b, a1, a2, seed):
    a1, a2 = sorted((a1, a2))
    mask = np.random.default_rng(seed).random((10, 10, 10)) < 0.2
    mask[5, 5, 5] = True
    bounds = Box((-12, -12, -12), (8, 8, 8))
    r1 = recall(enlarge_box(b, a1, bounds), mask, (2, 2, 2), (-10, -10, -10))
    r2 = recall(enlarge_box(b, a2, bounds), mask, (2, 2, 2), (-10, -10, -10))
    assert r2 >= r1


def test_mask_box_and_bounds():
    mask = np.zeros((5, 6, 7), bool)
    mask[1, 2, 3] = mask[3, 4, 5] = True
    assert mask_box(mask, (2, 2, 3), (1, 0, 0)) == Box((3, 4, 9), (7, 8, 15))
    v = Volume(np.zeros((5, 6, 7), np.int16), (2, 2, 3), (1, 0, 0))
    assert volume_bounds(v) == Box((0, -1, -1.5), (10, 11, 19.5))
    assert volume_bounds(v).volume == pytest.approx(v.physical_volume())


def _corner_map():
    """Map whose embedding is the voxel index itself, so queries retrieve known voxels."""
    idx = np.indices((6, 6, 6)).astype(np.float32)
    return EmbeddingMap(idx, (2, 2, 3), (1, 1, 1))


def test_predict_box_examples(rng):
    m = _corner_map()
    same = np.tile([2, 3, 4], (6, 1))
    assert predict_box(same, m) == Box(tuple(m.index_to_mm((2, 3, 4))), tuple(m.index_to_mm((2, 3, 4))))
    corners = [(1, 1, 1), (4, 4, 4), (1, 4, 1), (4, 1, 4), (1, 1, 4), (4, 4, 1)]
    assert predict_box(np.asarray(corners, float), m) == Box(tuple(m.index_to_mm((1, 1, 1))),
                                                            tuple(m.index_to_mm((4, 4, 4))))
    rm = EmbeddingMap(rng.normal(size=(3, 6, 5, 4)), (1, 2, 3))
    for _ in range(10):
        qs = rng.normal(size=(6, 3))
        pts = [nearest_voxel(rm, q).point_mm for q in qs]
        assert predict_box(qs, rm) == Box(tuple(np.min(pts, 0)), tuple(np.max(pts, 0)))


def test_few_shot_examples():
    m = _corner_map()
    shots = [np.asarray([(0, 1, 2), (3, 3, 3), (1, 1, 1), (2, 2, 2), (0, 0, 0), (5, 5, 5)], float),
             np.asarray([(1, 1, 1)] * 6, float),
             np.asarray([(2, 2, 2), (4, 1, 3), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)], float)]
    assert few_shot_box(shots[:1], m) == predict_box(shots[0], m)
    assert few_shot_box([shots[0], shots[0]], m) == predict_box(shots[0], m)
    # hand arithmetic in index space: mins (0,0,0) (1,1,1) (2,1,2) -> (1, 2/3, 1); maxes (5,5,5) (1,1,1) (4,2,3) -> (10/3, 8/3, 3)
    got = few_shot_box(shots, m)
    sp, org = np.array([2, 2, 3]), np.array([1, 1, 1])
    assert np.allclose(got.lo, org + sp * [1, 2 / 3, 1], atol=1e-12)
    assert np.allclose(got.hi, org + sp * [10 / 3, 8 / 3, 3], atol=1e-12)
    with pytest.raises(ValueError):
        few_shot_box([], m)


def _grid_oracle(preds, masks, volumes):
    for alpha in [1 + 0.05 * i for i in range(41)]:
        recalls, vrs = [], []
        for b, mask, v in zip(preds, masks, volumes):
            blo = np.asarray(v.origin) - np.asarray(v.spacing) / 2
            bhi = blo + np.asarray(v.shape) * np.asarray(v.spacing)
            c = (np.asarray(b.lo) + b.hi) / 2
            half = (np.asarray(b.hi) - b.lo) / 2 * alpha
            lo, hi = np.clip(c - half, blo, bhi), np.clip(c + half, blo, bhi)
            inside = total = 0
            for idx in zip(*np.nonzero(mask)):
                p = np.asarray(v.origin) + np.asarray(idx) * v.spacing
                total += 1
                inside += bool(np.all(p >= lo) and np.all(p <= hi))
            recalls.append(inside / total)
            vrs.append(np.prod(bhi - blo) / np.prod(hi - lo))
        if np.mean(recalls) >= 0.99:
            return alpha, np.mean(vrs), np.std(vrs)
    return None, math.nan, math.nan


def test_vr_examples():
    v = Volume(np.zeros((10, 10, 10), np.int16), (1, 1, 1))
    mask = np.zeros((10, 10, 10), bool)
    mask[2:5, 3:6, 4:8] = True
    box = mask_box(mask, (1, 1, 1))
    res = vr_at_99([box, box], [mask, mask], [v, v])
    assert res.alpha == 1.0 and res.recall == 1.0
    assert res.vr_mean == pytest.approx(1000 / box.volume) and res.vr_std == 0
    far = Box((8, 8, 8), (8.5, 8.5, 8.5))
    res = vr_at_99([far], [mask], [v])
    assert res.alpha is None and math.isnan(res.vr_mean) and res.recall < 0.99


def test_vr_matches_grid_oracle():
    volumes = [Volume(np.zeros((10, 10, 10), np.int16), (1, 1, 1)),
               Volume(np.zeros((12, 8, 6), np.int16), (1, 2, 3), (5, 0, -2)),
               Volume(np.zeros((10, 10, 10), np.int16), (2, 2, 2))]
    masks = [np.zeros(v.shape, bool) for v in volumes]
    masks[0][2:6, 2:6, 2:6] = True
    masks[1][4:9, 2:5, 1:4] = True
    masks[2][0:3, 5:9, 4:6] = True
    preds = [Box((3, 3, 3), (4, 4, 4)),  # shrunken, centered: needs alpha = 3
             Box((10, 5, 2), (12, 8, 6)),
             Box((0, 10, 8), (3, 15, 10))]
    res = vr_at_99(preds, masks, volumes)
    alpha, vr_mean, vr_std = _grid_oracle(preds, masks, volumes)
    assert res.alpha == pytest.approx(alpha)
    assert res.vr_mean == pytest.approx(vr_mean, rel=1e-12) and res.vr_std == pytest.approx(vr_std, rel=1e-12)
    assert res.vr_mean >= 1
    assert len(ALPHA_GRID) == 41 and ALPHA_GRID[0] == 1.0 and ALPHA_GRID[-1] == 3.0


def test_folds():
    ids = [f"v{i}" for i in range(12)]
    folds = make_folds(ids, 5, seed=3)
    assert len(folds) == 2 and all(len(f) == 5 for f in folds)
    assert len(set(itertools.chain(*folds))) == 10
    assert folds == make_folds(list(reversed(ids)), 5, seed=3)
    assert folds != make_folds(ids, 5, seed=4)
    with pytest.raises(ValueError):
        make_folds(ids[:5], 5, seed=0)


def test_evaluate_localization_rows(phantom, spec):
    from ape.phantom import generate_phantom

    samples = {f"p{i}": generate_phantom(spec, 100 + i) for i in range(4)}
    # an oracle map: every voxel's embedding is its own mm coordinate
    maps = {}
    for vid, s in samples.items():
        v = s.volume
        coords = np.stack(np.meshgrid(*[v.origin[a] + np.arange(v.shape[a]) * v.spacing[a] for a in range(3)],
                                      indexing="ij"))
        maps[vid] = EmbeddingMap(coords, v.spacing, v.origin)
    detail, report = evaluate_localization(
        maps, {k: {o: lm.edges for o, lm in s.landmarks.items()} for k, s in samples.items()},
        {k: s.masks for k, s in samples.items()}, {k: s.volume for k, s in samples.items()}, shots=2, seed=0)
    assert [r["organ"] for r in report] == sorted(spec.labels)
    assert all(r["n"] == 4 for r in report)  # two folds of 2, each tested on the other two
    assert len(detail) == 8 * 4
    # positions barely move between phantoms, so the retrieved boxes nearly match
    assert np.mean([r["iou_mean"] for r in report]) > 0.6
