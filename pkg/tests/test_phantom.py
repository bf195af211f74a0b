import itertools

import numpy as np
import pytest

from ape.phantom import (
    EDGE_NAMES,
    OrganTemplate,
    PhantomSpec,
    PhantomSpecError,
    generate_phantom,
    load_phantom,
    organ_center,
    organ_edge_points,
    save_phantom,
)


def _still(spec: PhantomSpec, **kw) -> PhantomSpec:
    import dataclasses

    return dataclasses.replace(spec, scale_range=(1.0, 1.0), center_jitter_mm=0.0, deformation_mm=0.0,
                               noise_std_hu=0.0, **kw)


def test_same_seed_is_bit_identical(spec):
    a, b = generate_phantom(spec, 11), generate_phantom(spec, 11)
    assert a == b
    assert not np.array_equal(a.volume.data, generate_phantom(spec, 12).volume.data)


def test_still_phantom_puts_centers_on_templates():
    # odd grid with unit spacing: body center and organ centers fall on voxel centers, so the
    # voxelized ellipsoids are symmetric and their centroids are exact
    spec = _still(PhantomSpec(), shape=(41, 41, 41), spacing=(1.0, 1.0, 1.0), body_radii_mm=(19.0, 19.0, 19.0),
                  organs=(OrganTemplate("a", (7 / 19, 3 / 19, 4 / 19), (3, 3, 3), 50),
                          OrganTemplate("b", (-7 / 19, -4 / 19, -3 / 19), (3, 2, 3), 80)))
    s = generate_phantom(spec, 0)
    for o in spec.organs:
        expected = spec.body_center_mm() + np.asarray(o.center) * spec.body_radii_mm
        assert np.allclose(s.landmarks[o.label].center, expected, atol=1e-9)


def test_still_default_phantom_centers_within_half_voxel(spec):
    still = _still(spec)
    s = generate_phantom(still, 0)
    for o in still.organs:
        expected = still.body_center_mm() + np.asarray(o.center) * still.body_radii_mm
        assert np.all(np.abs(s.landmarks[o.label].center - expected) <= np.asarray(still.spacing) / 2)


def test_intensities(spec, phantom):
    v = phantom.volume.data
    assert abs(np.median(v[0]) - spec.background_hu) < 3 * spec.noise_std_hu
    liver = phantom.masks["liver"]
    assert abs(v[liver].mean() - 70) < 5
    assert v.dtype == np.int16


@pytest.mark.slow
def test_default_masks_nonempty_disjoint_and_ordered(spec):
    orders = set()
    for seed in range(100):
        s = generate_phantom(spec, seed)
        stack = np.stack([s.masks[label] for label in spec.labels])
        assert stack.any(axis=(1, 2, 3)).all()
        assert stack.sum(axis=0).max() <= 1  # pairwise disjoint
        centers = np.stack([s.landmarks[label].center for label in spec.labels])
        orders.add(tuple(tuple(np.argsort(centers[:, a])) for a in range(3)))
        body = s.volume.data > -500
        for label in spec.labels:
            assert body[s.masks[label]].all()
    assert len(orders) == 1


def test_landmarks_inside_mask_bounding_box(phantom):
    for label, mask in phantom.masks.items():
        idx = np.argwhere(mask)
        lo = phantom.volume.index_to_mm(idx.min(0))
        hi = phantom.volume.index_to_mm(idx.max(0))
        lm = phantom.landmarks[label]
        for p in [lm.center, *lm.edges]:
            assert np.all(p >= lo - 1e-9) and np.all(p <= hi + 1e-9)


def test_organ_center_examples():
    m = np.zeros((5, 5, 5), bool)
    m[1, 2, 3] = True
    assert np.array_equal(organ_center(m, (1, 1, 1)), [1, 2, 3])
    m = np.zeros((3, 1, 1), bool)
    m[0, 0, 0] = m[2, 0, 0] = True
    assert np.array_equal(organ_center(m, (1, 1, 1)), [1, 0, 0])
    m = np.zeros((10, 10, 10), bool)
    m[4:7, 4:7, 4:7] = True
    pts = [np.array(i) * [2, 2, 3] for i in itertools.product(range(4, 7), repeat=3)]
    assert np.allclose(organ_center(m, (2, 2, 3)), np.mean(pts, axis=0))
    assert np.allclose(organ_center(m, (2, 2, 3)), [10, 10, 15])
    with pytest.raises(ValueError):
        organ_center(np.zeros((2, 2, 2), bool), (1, 1, 1))


def test_edge_points_single_voxel_and_box():
    m = np.zeros((4, 4, 4), bool)
    m[2, 1, 3] = True
    assert np.array_equal(organ_edge_points(m, (1, 2, 3), (1, 1, 1)), np.tile([3, 3, 10], (6, 1)))
    m = np.zeros((9, 9, 9), bool)
    m[1:6, 2:5, 3:8] = True  # centered at (3, 3, 5)
    expected = [(1, 3, 5), (5, 3, 5), (3, 2, 5), (3, 4, 5), (3, 3, 3), (3, 3, 7)]
    assert np.array_equal(organ_edge_points(m, (1, 1, 1)), np.asarray(expected, float))
    assert len(EDGE_NAMES) == 6


def _edge_oracle(mask, spacing):
    idx = [tuple(i) for i in np.argwhere(mask)]
    centroid = np.mean(idx, axis=0)
    out = []
    for axis in range(3):
        other = [a for a in range(3) if a != axis]
        for pick in (min, max):
            ext = pick(i[axis] for i in idx)
            best, best_d = None, np.inf
            for i in idx:  # C order, strict < keeps the first tie
                if i[axis] != ext:
                    continue
                d = sum(((i[a] - centroid[a]) * spacing[a]) ** 2 for a in other)
                if d < best_d:
                    best, best_d = i, d
            out.append(np.asarray(best) * spacing)
    return np.asarray(out)


def test_edge_points_match_exhaustive_oracle(spec):
    for seed in (0, 1):
        s = generate_phantom(spec, seed)
        for label, mask in s.masks.items():
            got = organ_edge_points(mask, spec.spacing)
            assert np.allclose(got, _edge_oracle(mask, np.asarray(spec.spacing)))
            assert np.allclose(got, s.landmarks[label].edges)


def test_edge_points_on_surface(phantom):
    for label, mask in phantom.masks.items():
        padded = np.pad(mask, 1)
        for p in phantom.landmarks[label].edges:
            i = np.rint(phantom.volume.mm_to_index(p)).astype(int) + 1
            assert padded[tuple(i)]
            neighbours = [padded[tuple(i + d)] for d in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)])]
            assert not all(neighbours)


def test_save_load_round_trip(tmp_path, phantom):
    save_phantom(phantom, tmp_path / "p")
    assert load_phantom(tmp_path / "p") == phantom


def test_phantom_settings_validation(spec):
    import dataclasses

    spec.validate()
    with pytest.raises(PhantomSpecError):
        dataclasses.replace(spec, organs=(OrganTemplate("a", (0, 0, 0), (0, 1, 1), 0),)).validate()
    with pytest.raises(PhantomSpecError):  # overlapping templates
        dataclasses.replace(spec, organs=(OrganTemplate("a", (0, 0, 0), (5, 5, 5), 0),
                                          OrganTemplate("b", (0.05, 0.3, 0.3), (5, 5, 5), 0))).validate()
    with pytest.raises(PhantomSpecError):  # jitter large enough to swap organ order
        dataclasses.replace(spec, center_jitter_mm=20.0).validate()
    with pytest.raises(PhantomSpecError):
        dataclasses.replace(spec, body_radii_mm=(80.0, 50.0, 64.0)).validate()
    with pytest.raises(PhantomSpecError):
        generate_phantom(dataclasses.replace(spec, scale_range=(0.0, 1.0)), 0)
