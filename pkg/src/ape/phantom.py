"""Synthetic anatomies with exact ground truth.

Each phantom is an ellipsoidal body (soft tissue under a thin fat layer) on
an air background, holding a fixed set of ellipsoidal organs. Organ placement
follows a shared template so that relative positions agree across samples,
while a per-sample affine scale, per-organ jitter and a smooth displacement
field make every sample a slightly different "patient".
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume_io import Volume, load_array, load_volume, save_array, save_volume

__all__ = [
    "OrganTemplate",
    "PhantomSpec",
    "PhantomSpecError",
    "OrganLandmarks",
    "PhantomSample",
    "default_spec",
    "generate_phantom",
    "organ_center",
    "organ_edge_points",
    "save_phantom",
    "load_phantom",
    "EDGE_NAMES",
]

EDGE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class OrganTemplate:
    label: str
    center: tuple[float, float, float]  # in units of the body radii, body center at 0
    radii_mm: tuple[float, float, float]
    hu: float


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (2.0, 2.0, 3.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    body_radii_mm: tuple[float, float, float] = (58.0, 50.0, 64.0)
    body_hu: float = 0.0
    fat_hu: float = -100.0
    fat_thickness_mm: float = 5.0
    background_hu: float = -800.0
    organs: tuple[OrganTemplate, ...] = field(default_factory=lambda: _DEFAULT_ORGANS)
    scale_range: tuple[float, float] = (0.93, 1.07)
    center_jitter_mm: float = 1.0
    noise_std_hu: float = 15.0
    deformation_mm: float = 1.0
    smoothness_mm: float = 32.0

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.organs]

    def body_center_mm(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.shape) - 1) / 2 * np.asarray(self.spacing)

    def validate(self) -> None:
        """Raise :class:`PhantomSpecError` unless every sample is guaranteed well formed.

        The checks are conservative worst cases over the jitter ranges: organ
        centers keep their per-axis ordering, organs never touch each other,
        organs stay inside the body and the body stays inside the grid.
        """
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise PhantomSpecError(f"grid shape must have 3 axes of length >= 2, got {self.shape}")
        if min(self.spacing) <= 0:
            raise PhantomSpecError("spacing must be positive")
        if not self.organs:
            raise PhantomSpecError("at least one organ template is required")
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise PhantomSpecError(f"duplicate organ labels in {labels}")
        if min(self.body_radii_mm) <= 0:
            raise PhantomSpecError("body radii must be positive")
        s_lo, s_hi = self.scale_range
        if not 0 < s_lo <= s_hi:
            raise PhantomSpecError(f"invalid scale range {self.scale_range}")
        if min(self.center_jitter_mm, self.deformation_mm, self.noise_std_hu) < 0:
            raise PhantomSpecError("jitter, deformation and noise must be non-negative")
        if self.smoothness_mm <= 0:
            raise PhantomSpecError("smoothness scale must be positive")
        for o in self.organs:
            if min(o.radii_mm) <= 0:
                raise PhantomSpecError(f"organ {o.label!r} has non-positive radii {o.radii_mm}")

        body_r = np.asarray(self.body_radii_mm)
        half_extent = (np.asarray(self.shape) - 1) / 2 * np.asarray(self.spacing)
        if np.any(body_r * s_hi > half_extent):
            raise PhantomSpecError("body does not fit inside the grid at the largest scale")

        # per-axis wobble of a landmark center: jitter + displacement + half a voxel of discretization
        wobble = self.center_jitter_mm + self.deformation_mm + np.asarray(self.spacing) / 2
        # radius of the ball that surely contains a jittered, deformed organ around its template center
        reach = {
            o.label: max(o.radii_mm) * s_hi + math.sqrt(3) * (self.center_jitter_mm + self.deformation_mm)
            for o in self.organs
        }
        offsets = {o.label: np.asarray(o.center) * body_r for o in self.organs}
        for a, b in itertools.combinations(self.organs, 2):
            gap = np.abs(offsets[a.label] - offsets[b.label]) * s_lo
            if np.any(gap <= 2 * wobble):
                axis = int(np.argmax(gap <= 2 * wobble))
                raise PhantomSpecError(
                    f"organs {a.label!r} and {b.label!r} may swap order along axis {axis}"
                )
            if s_lo * np.linalg.norm(offsets[a.label] - offsets[b.label]) <= reach[a.label] + reach[b.label]:
                raise PhantomSpecError(f"organ templates {a.label!r} and {b.label!r} may overlap")
        for o in self.organs:
            # distance from an interior point c of an ellipsoid to its surface is >= min(R) * (1 - |c/R|)
            depth = s_lo * min(self.body_radii_mm) * (1 - np.linalg.norm(o.center))
            if depth <= reach[o.label]:
                raise PhantomSpecError(f"organ {o.label!r} may leave the body")


_DEFAULT_ORGANS = (
    OrganTemplate("liver", (0.56, -0.08, -0.40), (9.0, 8.0, 10.0), 70.0),
    OrganTemplate("spleen", (0.40, -0.40, 0.24), (8.0, 7.0, 10.0), 120.0),
    OrganTemplate("pancreas", (0.08, -0.56, -0.24), (8.0, 7.0, 10.0), 40.0),
    OrganTemplate("stomach", (-0.56, 0.24, -0.08), (9.0, 8.0, 9.0), -60.0),
    OrganTemplate("kidney_r", (-0.08, -0.24, 0.56), (7.0, 6.0, 8.0), 180.0),
    OrganTemplate("kidney_l", (-0.24, 0.40, 0.40), (7.0, 7.0, 9.0), 220.0),
    OrganTemplate("gallbladder", (-0.40, 0.08, -0.56), (6.0, 6.0, 7.0), -30.0),
    OrganTemplate("aorta", (0.24, 0.56, 0.08), (7.0, 6.0, 10.0), 260.0),
)


def default_spec() -> PhantomSpec:
    return PhantomSpec()


@dataclass
class OrganLandmarks:
    center: np.ndarray  # (3,) mm
    edges: np.ndarray  # (6, 3) mm, ordered as EDGE_NAMES


@dataclass(eq=False)
class PhantomSample:
    volume: Volume
    masks: dict[str, np.ndarray]
    landmarks: dict[str, OrganLandmarks]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, PhantomSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.volume == other.volume
            and self.masks.keys() == other.masks.keys()
            and all(np.array_equal(self.masks[k], other.masks[k]) for k in self.masks)
            and all(
                np.array_equal(self.landmarks[k].center, other.landmarks[k].center)
                and np.array_equal(self.landmarks[k].edges, other.landmarks[k].edges)
                for k in self.landmarks
            )
        )


def _linear_weights(n_out: int, step_out: float, step_ctrl: float, n_ctrl: int) -> np.ndarray:
    """Matrix mapping control-point values to linearly interpolated values at grid points."""
    pos = np.arange(n_out) * step_out / step_ctrl
    lo = np.clip(np.floor(pos).astype(int), 0, n_ctrl - 2)
    frac = pos - lo
    w = np.zeros((n_out, n_ctrl))
    w[np.arange(n_out), lo] = 1 - frac
    w[np.arange(n_out), lo + 1] = frac
    return w


def _displacement_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement (3, H, W, D) in mm, each component bounded by ``deformation_mm``."""
    extent = (np.asarray(spec.shape) - 1) * np.asarray(spec.spacing)
    n_ctrl = [int(math.ceil(e / spec.smoothness_mm)) + 1 for e in extent]
    ctrl = rng.uniform(-spec.deformation_mm, spec.deformation_mm, size=(3, *n_ctrl))
    w = [_linear_weights(n, s, spec.smoothness_mm, c) for n, s, c in zip(spec.shape, spec.spacing, n_ctrl)]
    return np.einsum("kabc,ia,jb,lc->kijl", ctrl, w[0], w[1], w[2], optimize=True)


def generate_phantom(spec: PhantomSpec, seed: int) -> PhantomSample:
    spec.validate()
    rng = np.random.default_rng(seed)
    scale = rng.uniform(*spec.scale_range, size=3)
    jitter = rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, size=(len(spec.organs), 3))
    disp = _displacement_field(spec, rng)

    sp = np.asarray(spec.spacing)
    center = spec.body_center_mm()
    axes = [spec.origin[a] + np.arange(spec.shape[a]) * sp[a] - center[a] for a in range(3)]
    rel = np.stack(np.meshgrid(*axes, indexing="ij"))  # mm relative to the body center

    body_r = np.asarray(spec.body_radii_mm) * scale
    r_body = np.sqrt(sum((rel[a] / body_r[a]) ** 2 for a in range(3)))
    inner_r = body_r - spec.fat_thickness_mm
    r_inner = np.sqrt(sum((rel[a] / inner_r[a]) ** 2 for a in range(3)))

    image = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    image[r_body <= 1] = spec.fat_hu
    image[r_inner <= 1] = spec.body_hu

    warped = rel + disp
    labels = np.zeros(spec.shape, dtype=np.int16)
    for k, organ in enumerate(spec.organs, start=1):
        c = np.asarray(organ.center) * np.asarray(spec.body_radii_mm) * scale + jitter[k - 1]
        r = np.asarray(organ.radii_mm) * scale
        inside = sum(((warped[a] - c[a]) / r[a]) ** 2 for a in range(3)) <= 1
        labels[inside & (labels == 0)] = k
    for k, organ in enumerate(spec.organs, start=1):
        image[labels == k] = organ.hu

    if spec.noise_std_hu > 0:
        image += rng.normal(0.0, spec.noise_std_hu, size=spec.shape)
    data = np.clip(np.rint(image), -32768, 32767).astype(np.int16)
    volume = Volume(data, spec.spacing, spec.origin)

    masks, landmarks = {}, {}
    for k, organ in enumerate(spec.organs, start=1):
        mask = labels == k
        if not mask.any():
            raise PhantomSpecError(f"organ {organ.label!r} vanished for seed {seed}")
        masks[organ.label] = mask
        landmarks[organ.label] = OrganLandmarks(
            organ_center(mask, spec.spacing, spec.origin),
            organ_edge_points(mask, spec.spacing, spec.origin),
        )
    return PhantomSample(volume, masks, landmarks, int(seed))


def organ_center(mask: np.ndarray, spacing: Sequence[float], origin: Sequence[float] = (0, 0, 0)) -> np.ndarray:
    """Center of mass (mm) of a binary mask."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise ValueError("organ_center of an empty mask")
    return np.asarray(origin, dtype=float) + idx.mean(axis=0) * np.asarray(spacing, dtype=float)


def organ_edge_points(mask: np.ndarray, spacing: Sequence[float], origin: Sequence[float] = (0, 0, 0)) -> np.ndarray:
    """Six extreme points (mm) of a mask, two per axis, ordered x-, x+, y-, y+, z-, z+.

    Within the extreme slice the voxel closest (in mm, over the two remaining
    axes) to the mask centroid is chosen; remaining ties go to the first voxel
    in C order.
    """
    idx = np.argwhere(mask)
    if len(idx) == 0:
        raise ValueError("organ_edge_points of an empty mask")
    sp = np.asarray(spacing, dtype=float)
    centroid = idx.mean(axis=0)
    points = []
    for axis in range(3):
        other = [a for a in range(3) if a != axis]
        for extreme in (idx[:, axis].min(), idx[:, axis].max()):
            cand = idx[idx[:, axis] == extreme]
            d2 = (((cand[:, other] - centroid[other]) * sp[other]) ** 2).sum(axis=1)
            points.append(cand[int(np.argmin(d2))])
    return np.asarray(origin, dtype=float) + np.asarray(points, dtype=float) * sp


def save_phantom(sample: PhantomSample, directory) -> None:
    """Write volume, one uint8 mask per organ and a landmarks table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    v = sample.volume
    save_volume(v, directory / "volume")
    for label, mask in sample.masks.items():
        save_array(mask.astype(np.uint8), directory / f"mask_{label}", v.spacing, v.origin, dtype="uint8")
    header = ["label", "cx", "cy", "cz"] + [f"{e}_{c}" for e in EDGE_NAMES for c in "xyz"]
    lines = [f"# seed={sample.seed}", "\t".join(header)]
    for label, lm in sample.landmarks.items():
        values = [lm.center, *lm.edges]
        lines.append("\t".join([label] + [repr(float(x)) for p in values for x in p]))
    (directory / "landmarks.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_phantom(directory) -> PhantomSample:
    directory = Path(directory)
    volume = load_volume(directory / "volume")
    lines = (directory / "landmarks.tsv").read_text(encoding="utf-8").splitlines()
    seed = int(lines[0].split("=", 1)[1])
    masks, landmarks = {}, {}
    for line in lines[2:]:
        label, *values = line.split("\t")
        arr = np.asarray([float(x) for x in values]).reshape(7, 3)
        landmarks[label] = OrganLandmarks(arr[0], arr[1:])
        mask, _ = load_array(directory / f"mask_{label}", expected_dtype="uint8")
        masks[label] = mask.astype(bool)
    return PhantomSample(volume, masks, landmarks, seed)
