"""Patch and voxel-pair sampling for training.

Every patch carries an exact affine map from its voxel indices to physical
millimetres in the raw image frame, so that voxels of two differently cropped
and rescaled patches can be matched by physical position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .volume_io import Volume

__all__ = [
    "AugConfig",
    "SamplerConfig",
    "SamplerError",
    "Patch",
    "PatchPair",
    "VoxelPairBatch",
    "NormalizedCoords",
    "draw_patch_shape",
    "crop_patch",
    "rescale_patch",
    "augment_patch",
    "sample_patch_pair",
    "sample_positive_pairs",
    "sample_independent_patches",
    "sample_voxels",
    "normalize_coords",
    "overlap_fraction",
]


class SamplerError(ValueError):
    pass


@dataclass
class AugConfig:
    """Probabilities and parameter ranges of the patch augmentations.

    Blur and sharpening are mutually exclusive: one uniform draw picks blur
    with probability ``p_blur``, sharpening with ``p_sharpen``, or neither.
    """

    p_rescale: float = 1.0
    p_mask: float = 0.5
    mask_size_range: tuple[float, float] = (0.1, 0.4)  # fraction of the patch side
    mask_fill_hu: float = -1000.0
    p_blur: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)  # voxels
    p_sharpen: float = 0.2
    sharpen_alpha_range: tuple[float, float] = (0.5, 1.5)
    sharpen_sigma: float = 1.0
    p_noise: float = 0.5
    noise_std_range: tuple[float, float] = (5.0, 30.0)  # HU
    p_window: float = 0.5
    window_lo_range: tuple[float, float] = (-1000.0, -200.0)
    window_hi_range: tuple[float, float] = (150.0, 1000.0)

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls(p_rescale=0.0, p_mask=0.0, p_blur=0.0, p_sharpen=0.0, p_noise=0.0, p_window=0.0)

    def validate(self) -> None:
        for name in ("p_rescale", "p_mask", "p_blur", "p_sharpen", "p_noise", "p_window"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"aug.{name} must be a probability, got {p}")
        if self.p_blur + self.p_sharpen > 1.0:
            raise ValueError("aug.p_blur + aug.p_sharpen must not exceed 1")
        for name in ("mask_size_range", "blur_sigma_range", "sharpen_alpha_range", "noise_std_range",
                     "window_lo_range", "window_hi_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"aug.{name} is empty: {lo} > {hi}")
        if self.window_lo_range[1] > self.window_hi_range[0]:
            raise ValueError("aug window ranges overlap; lo must stay below hi")


@dataclass
class SamplerConfig:
    patch_budget: tuple[int, int, int] = (32, 32, 24)
    aspect_ratio_max: float = 2.0
    spacing_min_mm: tuple[float, float, float] = (2.0, 2.0, 3.0)
    spacing_max_mm: tuple[float, float, float] = (4.0, 4.0, 6.0)
    min_overlap_fraction: float = 0.25
    shape_multiple: int = 4
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> None:
        if min(self.patch_budget) < 1:
            raise ValueError("patch_budget must be positive")
        if self.aspect_ratio_max < 1:
            raise ValueError("aspect_ratio_max must be >= 1")
        if any(lo <= 0 or lo > hi for lo, hi in zip(self.spacing_min_mm, self.spacing_max_mm)):
            raise ValueError("need 0 < spacing_min_mm <= spacing_max_mm on every axis")
        if not 0 < self.min_overlap_fraction <= 1:
            raise ValueError("min_overlap_fraction must be in (0, 1]")
        if self.shape_multiple < 1:
            raise ValueError("shape_multiple must be >= 1")
        self.aug.validate()


@dataclass
class Patch:
    """Image patch with an axis-aligned affine index -> mm map.

    ``origin`` is the physical position of voxel (0, 0, 0) and ``spacing``
    the step per index; the footprint of the patch is the union of its voxel
    boxes.
    """

    data: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray
    augmentations: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def index_to_mm(self, index) -> np.ndarray:
        return self.origin + np.asarray(index, dtype=float) * self.spacing

    def mm_to_index(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=float) - self.origin) / self.spacing

    def footprint(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin - self.spacing / 2
        return lo, lo + np.asarray(self.shape) * self.spacing


@dataclass
class PatchPair:
    patch_a: Patch
    patch_b: Patch
    overlap_lo: np.ndarray
    overlap_hi: np.ndarray


@dataclass
class VoxelPairBatch:
    """Matched voxels: ``index_a[i]`` in one patch and ``index_b[i]`` in the
    other both sit at (within half a voxel of) physical point ``points[i]``.
    For independent-patch batches ``index_b`` is None."""

    index_a: np.ndarray
    index_b: np.ndarray | None
    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


class NormalizedCoords(NamedTuple):
    values: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple[bool, bool, bool]


def draw_patch_shape(rng: np.random.Generator, cfg: SamplerConfig) -> tuple[int, int, int]:
    """Voxel shape with roughly ``prod(patch_budget)`` voxels.

    Per-axis stretch factors (relative to ``patch_budget``) have product one
    and a max/min ratio of at most ``aspect_ratio_max``; sides are rounded to
    ``shape_multiple``.
    """
    half = math.log(cfg.aspect_ratio_max) / 2
    budget = np.asarray(cfg.patch_budget, dtype=float)
    for _ in range(100):
        u = rng.uniform(-half, half, size=3)
        u -= u.mean()
        if u.max() - u.min() <= 2 * half + 1e-12:
            break
    else:  # pragma: no cover - the loop accepts with high probability
        u = np.zeros(3)
    m = cfg.shape_multiple
    shape = np.maximum(m, np.rint(budget * np.exp(u) / m) * m).astype(int)
    return tuple(int(s) for s in shape)  # type: ignore[return-value]


def crop_patch(v: Volume, start: Sequence[int], size: Sequence[int]) -> Patch:
    start = np.asarray(start, dtype=int)
    size = np.asarray(size, dtype=int)
    sl = tuple(slice(s, s + n) for s, n in zip(start, size))
    return Patch(v.data[sl], v.index_to_mm(start), np.asarray(v.spacing))


def rescale_patch(p: Patch, spacing: Sequence[float]) -> Patch:
    """Trilinear resampling to (approximately) ``spacing``, keeping the footprint.

    The new voxel count per axis is ``round(n * old / new)``; the spacing is
    then adjusted so that the footprint is preserved exactly.
    """
    old_shape = np.asarray(p.shape)
    new_shape = np.maximum(1, np.rint(old_shape * p.spacing / np.asarray(spacing, dtype=float))).astype(int)
    ratio = old_shape / new_shape
    data = ndimage.affine_transform(
        p.data, np.diag(ratio), offset=(ratio - 1) / 2, output_shape=tuple(new_shape), order=1, mode="nearest"
    )
    new_spacing = p.spacing * ratio
    new_origin = p.origin - p.spacing / 2 + new_spacing / 2
    return Patch(data, new_origin, new_spacing, list(p.augmentations))


def augment_patch(
    p: Patch,
    rng: np.random.Generator,
    aug: AugConfig,
    spacing: Sequence[float] | None = None,
) -> Patch:
    """Apply the random augmentations, each with its configured probability.

    Only the rescale to ``spacing`` touches the index -> mm map; it is
    skipped when ``spacing`` is None. Intensity ops leave geometry alone.
    """
    out = Patch(p.data.copy(), p.origin.copy(), p.spacing.copy(), list(p.augmentations))
    # one draw per op, in a fixed order, regardless of which ops fire
    u = rng.uniform(size=6)
    if spacing is not None and u[0] < aug.p_rescale:
        out = rescale_patch(out, spacing)
        out.augmentations.append(("rescale", tuple(float(s) for s in out.spacing)))
    data = out.data
    shape = np.asarray(data.shape)
    if u[1] < aug.p_mask:
        size = np.maximum(1, np.rint(shape * rng.uniform(*aug.mask_size_range, size=3))).astype(int)
        start = np.array([rng.integers(0, n - s + 1) for n, s in zip(shape, size)])
        sl = tuple(slice(a, a + s) for a, s in zip(start, size))
        data[sl] = aug.mask_fill_hu
        out.augmentations.append(("mask", tuple(start.tolist()), tuple(size.tolist())))
    if u[2] < aug.p_blur:
        sigma = rng.uniform(*aug.blur_sigma_range)
        data = ndimage.gaussian_filter(data, sigma, mode="nearest")
        out.augmentations.append(("blur", float(sigma)))
    elif u[2] < aug.p_blur + aug.p_sharpen:
        alpha = rng.uniform(*aug.sharpen_alpha_range)
        blurred = ndimage.gaussian_filter(data, aug.sharpen_sigma, mode="nearest")
        data = data + alpha * (data - blurred)
        out.augmentations.append(("sharpen", float(alpha)))
    if u[3] < aug.p_noise:
        std = rng.uniform(*aug.noise_std_range)
        data = data + rng.normal(0.0, std, size=data.shape)
        out.augmentations.append(("noise", float(std)))
    if u[4] < aug.p_window:
        lo = rng.uniform(*aug.window_lo_range)
        hi = rng.uniform(*aug.window_hi_range)
        data = np.clip(data, lo, hi)
        out.augmentations.append(("window", float(lo), float(hi)))
    out.data = np.asarray(data, dtype=np.float32)
    return out


def overlap_fraction(a: Patch, b: Patch) -> float:
    """Volume of the footprint intersection over the smaller footprint."""
    a_lo, a_hi = a.footprint()
    b_lo, b_hi = b.footprint()
    inter = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0, None)
    return float(np.prod(inter) / min(np.prod(a_hi - a_lo), np.prod(b_hi - b_lo)))


def _native_size(v: Volume, shape, spacing_mm) -> np.ndarray:
    size = np.rint(np.asarray(shape) * np.asarray(spacing_mm) / np.asarray(v.spacing)).astype(int)
    return np.clip(size, 1, np.asarray(v.shape))


def _check_volume_size(v: Volume, shape, cfg: SamplerConfig) -> None:
    need = np.asarray(shape) * np.asarray(cfg.spacing_min_mm)
    have = np.asarray(v.shape) * np.asarray(v.spacing)
    if np.any(have < need - 1e-9):
        raise SamplerError(
            f"volume extent {tuple(have.round(2))} mm is smaller than the minimum patch extent "
            f"{tuple(need.round(2))} mm"
        )


def sample_patch_pair(
    v: Volume,
    rng: np.random.Generator,
    cfg: SamplerConfig,
    shape: Sequence[int] | None = None,
    max_tries: int = 100,
) -> PatchPair:
    """Two overlapping crops, each rescaled to its own random spacing and augmented.

    Both patches share the voxel ``shape`` (drawn when not given). Crops are
    aligned to the volume grid; their footprints overlap by at least
    ``cfg.min_overlap_fraction`` of the smaller one.
    """
    shape = tuple(shape) if shape is not None else draw_patch_shape(rng, cfg)
    _check_volume_size(v, shape, cfg)
    vol_n = np.asarray(v.shape)
    f = cfg.min_overlap_fraction
    for _ in range(max_tries):
        size_a = _native_size(v, shape, rng.uniform(cfg.spacing_min_mm, cfg.spacing_max_mm))
        size_b = _native_size(v, shape, rng.uniform(cfg.spacing_min_mm, cfg.spacing_max_mm))
        common = np.minimum(size_a, size_b)
        # per-axis overlaps of g * common multiply up to exactly f * (smaller volume)
        g = (f * min(np.prod(size_a), np.prod(size_b)) / np.prod(common)) ** (1 / 3)
        if g <= 1 + 1e-12:
            break
    else:
        raise SamplerError("could not draw patch spacings compatible with min_overlap_fraction")
    need = np.minimum(common, np.ceil(g * common - 1e-9)).astype(int)
    start_a = np.array([rng.integers(0, n - s + 1) for n, s in zip(vol_n, size_a)])
    lo = np.maximum(0, start_a + need - size_b)
    hi = np.minimum(vol_n - size_b, start_a + size_a - need)
    start_b = np.array([rng.integers(l, h + 1) for l, h in zip(lo, hi)])

    pa = crop_patch(v, start_a, size_a)
    pb = crop_patch(v, start_b, size_b)
    target_a = pa.spacing * size_a / np.asarray(shape)
    target_b = pb.spacing * size_b / np.asarray(shape)
    pa = augment_patch(pa, rng, cfg.aug, target_a)
    pb = augment_patch(pb, rng, cfg.aug, target_b)
    (a_lo, a_hi), (b_lo, b_hi) = pa.footprint(), pb.footprint()
    return PatchPair(pa, pb, np.maximum(a_lo, b_lo), np.minimum(a_hi, b_hi))


def _index_range(p: Patch, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive index range of voxel centers of ``p`` inside the box [lo, hi]."""
    first = np.ceil((lo - p.origin) / p.spacing - 1e-9).astype(int)
    last = np.floor((hi - p.origin) / p.spacing + 1e-9).astype(int)
    n = np.asarray(p.shape)
    return np.clip(first, 0, n - 1), np.clip(last, 0, n - 1)


def _unravel_box(flat: np.ndarray, first: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return np.stack(np.unravel_index(flat, tuple(counts)), axis=1) + first


def sample_positive_pairs(pp: PatchPair, k: int, rng: np.random.Generator) -> VoxelPairBatch:
    """Draw ``k`` distinct voxels of patch A inside the overlap and match them in patch B.

    ``points`` are the voxel centers of patch A; the partner index in B is
    the B voxel nearest to that point.
    """
    a, b = pp.patch_a, pp.patch_b
    first, last = _index_range(a, pp.overlap_lo, pp.overlap_hi)
    counts = last - first + 1
    if np.any(pp.overlap_hi <= pp.overlap_lo) or np.any(counts < 1):
        raise SamplerError("patches do not overlap")
    total = int(np.prod(counts))
    if total < k:
        raise SamplerError(f"overlap holds only {total} voxels, cannot draw {k} distinct pairs")
    index_a = _unravel_box(rng.choice(total, size=k, replace=False), first, counts)
    points = a.index_to_mm(index_a)
    index_b = np.clip(np.rint(b.mm_to_index(points)).astype(int), 0, np.asarray(b.shape) - 1)
    return VoxelPairBatch(index_a, index_b, points)


def sample_independent_patches(
    v: Volume,
    n: int,
    rng: np.random.Generator,
    cfg: SamplerConfig,
    shape: Sequence[int] | None = None,
) -> list[Patch]:
    """``n`` un-augmented crops at the volume's native spacing, positioned independently."""
    shape = np.asarray(shape if shape is not None else draw_patch_shape(rng, cfg), dtype=int)
    if np.any(shape > np.asarray(v.shape)):
        raise SamplerError(f"volume of shape {v.shape} is smaller than the patch shape {tuple(shape)}")
    patches = []
    for _ in range(n):
        start = [rng.integers(0, vn - s + 1) for vn, s in zip(v.shape, shape)]
        patches.append(crop_patch(v, start, shape))
    return patches


def sample_voxels(p: Patch, k: int, rng: np.random.Generator) -> VoxelPairBatch:
    """``k`` distinct voxels drawn uniformly over the patch grid."""
    counts = np.asarray(p.shape)
    total = int(np.prod(counts))
    if total < k:
        raise SamplerError(f"patch holds only {total} voxels, cannot draw {k}")
    index = _unravel_box(rng.choice(total, size=k, replace=False), np.zeros(3, dtype=int), counts)
    return VoxelPairBatch(index, None, p.index_to_mm(index))


def normalize_coords(points, eps: float = 1e-6) -> NormalizedCoords:
    """Per-axis standardization over the batch (population std).

    Axes with zero variance use ``eps`` as their std and are flagged.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 2:
        raise ValueError(f"need at least two 3D points, got shape {points.shape}")
    mean = points.mean(axis=0)
    std = points.std(axis=0)
    degenerate = tuple(bool(s == 0) for s in std)
    std = np.where(std == 0, eps, std)
    return NormalizedCoords((points - mean) / std, mean, std, degenerate)  # type: ignore[arg-type]
