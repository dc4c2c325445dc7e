"""Region encoding, crop/patch planning, patch sampling, augmentation and phantoms."""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import volume_io
from .errors import ArgumentError, BoundsError, DataError, IOFailure, ShapeError
from .volume_io import LABEL_VALUES, LabelVolume, Volume

MODALITIES = ("t1", "t1ce", "t2", "flair")


def rng_stream(seed, *keys):
    """Independent generator for ``(seed, *keys)``; string keys are hashed with CRC32."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------- regions

@dataclass
class RegionMasks:
    """Whole tumor, tumor core and enhancing tumor as boolean grids."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        self.wt = np.asarray(self.wt, dtype=bool)
        self.tc = np.asarray(self.tc, dtype=bool)
        self.et = np.asarray(self.et, dtype=bool)
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise ShapeError("region masks must share one grid")

    def as_array(self, dtype=np.float32):
        return np.stack([self.wt, self.tc, self.et]).astype(dtype)

    @classmethod
    def from_array(cls, arr):
        return cls(arr[0] > 0, arr[1] > 0, arr[2] > 0)

    def is_nested(self):
        return bool(np.all(self.et <= self.tc) and np.all(self.tc <= self.wt))

    def repaired(self):
        tc = self.tc | self.et
        return RegionMasks(self.wt | tc, tc, self.et.copy())

    def __eq__(self, other):
        return (
            isinstance(other, RegionMasks)
            and np.array_equal(self.wt, other.wt)
            and np.array_equal(self.tc, other.tc)
            and np.array_equal(self.et, other.et)
        )


def region_encode(labels) -> RegionMasks:
    arr = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    bad = ~np.isin(arr, LABEL_VALUES)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"illegal label value {arr[idx]!r} at voxel {idx}")
    return RegionMasks(arr > 0, (arr == 1) | (arr == 4), arr == 4)


def region_decode(masks: RegionMasks, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)) -> LabelVolume:
    """Inverse of :func:`region_encode`; non-nested input is repaired by union first."""
    m = masks.repaired()
    out = np.zeros(m.wt.shape, dtype=np.uint8)
    out[m.wt] = 2
    out[m.tc] = 1
    out[m.et] = 4
    return LabelVolume(out, spacing_mm, origin_mm)


# ---------------------------------------------------------------- cropping and patch plans

def average_tumor_template(masks) -> np.ndarray:
    masks = list(masks)
    if not masks:
        raise ArgumentError("average_tumor_template needs at least one mask")
    arrays = [np.asarray(getattr(m, "data", m)) for m in masks]
    shape = arrays[0].shape
    acc = np.zeros(shape, dtype=np.float64)
    for a in arrays:
        if a.shape != shape:
            raise ShapeError(f"mask shape {a.shape} != {shape}")
        acc += a > 0
    return acc / len(arrays)


def _window_sums(arr, win):
    """Sum over every ``win``-sized window (valid positions) via a summed-volume table."""
    sat = np.zeros(tuple(n + 1 for n in arr.shape), dtype=np.float64)
    sat[1:, 1:, 1:] = arr.cumsum(0).cumsum(1).cumsum(2)
    a, b, c = win
    X, Y, Z = (n - w + 1 for n, w in zip(arr.shape, win))
    return (
        sat[a:, b:, c:]
        - sat[:X, b:, c:] - sat[a:, :Y, c:] - sat[a:, b:, :Z]
        + sat[:X, :Y, c:] + sat[:X, b:, :Z] + sat[a:, :Y, :Z]
        - sat[:X, :Y, :Z]
    )


def select_crop(template, crop_shape):
    """Offset of the ``crop_shape`` window holding the most template mass.

    Ties (within floating-point noise of the table arithmetic) go to the
    lexicographically smallest offset.
    """
    arr = np.asarray(getattr(template, "data", template), dtype=np.float64)
    crop_shape = tuple(int(c) for c in crop_shape)
    if any(c > n or c < 1 for c, n in zip(crop_shape, arr.shape)):
        raise BoundsError(f"crop {crop_shape} larger than volume {arr.shape}")
    sums = _window_sums(arr, crop_shape)
    best = sums.max()
    tol = 1e-9 * max(1.0, abs(best))
    flat = np.flatnonzero(sums.ravel() >= best - tol)[0]
    return tuple(int(i) for i in np.unravel_index(flat, sums.shape))


@dataclass
class PatchPlan:
    volume_shape: tuple
    patch_shape: tuple
    offsets: list = field(default_factory=list)


def _axis_positions(dim, patch):
    if patch > dim:
        raise BoundsError(f"patch {patch} larger than dimension {dim}")
    if dim == patch:
        return [0]
    n = math.ceil((dim - patch) / patch) + 1
    # half-up rounding keeps the positions independent of banker's rounding
    return [int(math.floor(i * (dim - patch) / (n - 1) + 0.5)) for i in range(n)]


def patch_grid(volume_shape, patch=(80, 80, 80)) -> PatchPlan:
    volume_shape = tuple(int(v) for v in volume_shape)
    patch = tuple(int(p) for p in patch)
    axes = [_axis_positions(d, p) for d, p in zip(volume_shape, patch)]
    offsets = [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]
    return PatchPlan(volume_shape, patch, offsets)


def extract(arr, offset, patch):
    """``arr[..., offset:offset+patch]`` over the last three axes (a view)."""
    sl = tuple(slice(o, o + p) for o, p in zip(offset, patch))
    return arr[(Ellipsis,) + sl]


# ---------------------------------------------------------------- cases and samples

@dataclass
class Case:
    """Stacked, normalized image channels ``[C, X, Y, Z]`` plus optional labels."""

    case_id: str
    image: np.ndarray
    labels: np.ndarray | None = None
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)
    _positives: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self):
        return tuple(self.image.shape[1:])

    def regions(self):
        if self.labels is None:
            raise DataError(f"case {self.case_id} has no labels")
        return region_encode(self.labels)

    def positive_offsets(self, plan: PatchPlan):
        key = (plan.patch_shape, tuple(plan.offsets))
        if key not in self._positives:
            wt = (self.labels > 0).astype(np.float64) if self.labels is not None else None
            pos = []
            if wt is not None and wt.any():
                sums = _window_sums(wt, plan.patch_shape)
                pos = [o for o in plan.offsets if sums[o] > 0.5]
            self._positives[key] = pos
        return self._positives[key]


@dataclass
class CaseSample:
    channels: np.ndarray
    regions: np.ndarray
    offset: tuple = (0, 0, 0)
    flips: tuple = (False, False, False)
    scale: float = 1.0


def mirrored_patch(volumes, offset, patch):
    """Patch at the x-mirrored offset, flipped along x to align with the original.

    ``volumes`` is ``[C, X, Y, Z]`` (or a single ``[X, Y, Z]`` grid).
    """
    arr = np.asarray(volumes)
    dim_x = arr.shape[-3]
    mx = dim_x - offset[0] - patch[0]
    mx = min(max(mx, 0), dim_x - patch[0])
    window = extract(arr, (mx, offset[1], offset[2]), patch)
    return np.flip(window, axis=-3).copy()


def sample_channels(case: Case, offset, patch, mirror=False):
    x = extract(case.image, offset, patch)
    if mirror:
        x = np.concatenate([x, mirrored_patch(case.image, offset, patch)], axis=0)
    return np.ascontiguousarray(x, dtype=np.float32)


def sample_patch(case: Case, plan: PatchPlan, rng, p_pos=0.7, mirror=False) -> CaseSample:
    """Draw one patch, biased toward patches containing tumor with probability ``p_pos``."""
    if not 0 <= p_pos <= 1:
        raise ArgumentError(f"p_pos must be in [0, 1], got {p_pos}")
    candidates = plan.offsets
    if rng.random() < p_pos:
        pos = case.positive_offsets(plan)
        if pos:
            candidates = pos
    offset = candidates[int(rng.integers(len(candidates)))]
    patch = plan.patch_shape
    channels = sample_channels(case, offset, patch, mirror)
    regions = region_encode(extract(case.labels, offset, patch)).as_array()
    return CaseSample(channels, regions, offset)


def augment_flip(sample: CaseSample, rng) -> CaseSample:
    """Mirror each spatial axis independently with probability 0.5."""
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    axes = tuple(i + 1 for i, f in enumerate(flips) if f)
    ch, rg = sample.channels, sample.regions
    if axes:
        ch = np.ascontiguousarray(np.flip(ch, axis=axes))
        rg = np.ascontiguousarray(np.flip(rg, axis=axes))
    prev = sample.flips
    return CaseSample(ch, rg, sample.offset, tuple(a ^ b for a, b in zip(prev, flips)), sample.scale)


def augment_scale(sample: CaseSample, rng, low=0.9, high=1.1) -> CaseSample:
    """Multiply all image intensities by one factor drawn from U[low, high]."""
    f = float(rng.uniform(low, high))
    return CaseSample(
        (sample.channels * np.float32(f)).astype(np.float32), sample.regions, sample.offset,
        sample.flips, sample.scale * f,
    )


# ---------------------------------------------------------------- phantoms

# per-modality (t1, t1ce, t2, flair) intensity offsets added inside each label
PHANTOM_CONTRAST = {
    2: (-0.25, 0.05, 0.60, 0.90),
    1: (-0.45, 0.15, 0.90, 0.40),
    4: (-0.30, 1.10, 0.70, 0.50),
}
# gain of the concentric healthy-tissue texture per modality
PHANTOM_TEXTURE_GAIN = (1.0, 0.5, -1.0, -0.5)
PHANTOM_TEXTURE_AMPLITUDE = 0.1
PHANTOM_NOISE_SIGMA = 0.05
PHANTOM_MIN_SHAPE = 32


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def make_phantom(rng, shape=(64, 64, 64), spacing=(1.0, 1.0, 1.0)):
    """Synthetic brain with nested ellipsoidal tumor compartments.

    Returns ``(volumes, labels)`` where ``volumes`` maps modality name to
    :class:`Volume`. The brain is an ellipsoid of intensity 1 with a weak
    x-symmetric concentric texture and N(0, 0.05) noise; edema (2) contains
    core (1), which contains enhancing tumor (4). Background is exactly 0.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < PHANTOM_MIN_SHAPE:
        raise ArgumentError(f"phantom shape must be >= {PHANTOM_MIN_SHAPE}^3, got {shape}")
    S = np.array(shape, dtype=np.float64)
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")

    center = (S - 1) / 2 + rng.uniform(-0.03, 0.03, 3) * S
    axes = S * rng.uniform(0.38, 0.44, 3)
    brain = _ellipsoid(grid, center, axes)

    r_norm = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)))
    texture = PHANTOM_TEXTURE_AMPLITUDE * np.cos(2 * np.pi * 2.5 * r_norm)

    t_center = center + rng.uniform(-1, 1, 3) * axes * 0.45
    r_edema = S * rng.uniform(0.10, 0.16, 3)
    c_core = t_center + rng.uniform(-0.2, 0.2, 3) * r_edema
    r_core = r_edema * rng.uniform(0.45, 0.65, 3)
    c_enh = c_core + rng.uniform(-0.15, 0.15, 3) * r_core
    r_enh = r_core * rng.uniform(0.5, 0.7, 3)
    edema = _ellipsoid(grid, t_center, r_edema) & brain
    core = _ellipsoid(grid, c_core, r_core) & edema
    enh = _ellipsoid(grid, c_enh, r_enh) & core

    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[core] = 1
    labels[enh] = 4

    volumes = {}
    for m, name in enumerate(MODALITIES):
        img = 1.0 + PHANTOM_TEXTURE_GAIN[m] * texture
        for lab, contrast in PHANTOM_CONTRAST.items():
            img = img + np.where(labels == lab, contrast[m], 0.0)
        img = img + rng.normal(0.0, PHANTOM_NOISE_SIGMA, shape)
        img = np.where(brain, img, 0.0).astype(np.float32)
        volumes[name] = Volume(img, spacing)
    return volumes, LabelVolume(labels, spacing)


# ---------------------------------------------------------------- case directories

def write_case(directory, case_id, volumes, labels=None):
    path = os.path.join(directory, case_id)
    try:
        os.makedirs(path, exist_ok=True)
        for name in MODALITIES:
            volume_io.save(volumes[name], os.path.join(path, f"{name}.nii"))
        if labels is not None:
            volume_io.save(labels, os.path.join(path, "seg.nii"))
    except OSError as exc:
        raise IOFailure(f"cannot write case {case_id}: {exc}") from exc
    return path


def read_case_volumes(path, with_labels=True):
    """Load ``{t1,t1ce,t2,flair}.nii`` (and ``seg.nii``) from a case directory."""
    case_id = os.path.basename(os.path.normpath(path))
    volumes = {}
    for name in MODALITIES:
        f = os.path.join(path, f"{name}.nii")
        if not os.path.exists(f):
            raise ArgumentError(f"case {case_id}: missing {name}.nii")
        volumes[name] = volume_io.load(f)
    labels = None
    if with_labels:
        f = os.path.join(path, "seg.nii")
        if not os.path.exists(f):
            raise ArgumentError(f"case {case_id}: missing seg.nii")
        labels = volume_io.load(f, labels=True)
    return volumes, labels


def prepare_case(case_id, volumes, labels=None, normalize=True, extra_channels=()):
    """Stack modalities (z-scored over nonzero voxels when ``normalize``) into a :class:`Case`."""
    first = volumes[MODALITIES[0]]
    chans = []
    for name in MODALITIES:
        v = volumes[name]
        if v.shape != first.shape:
            raise ShapeError(f"case {case_id}: {name} grid {v.shape} != {first.shape}")
        chans.append((volume_io.zscore_normalize(v) if normalize else v).data)
    for extra in extra_channels:
        chans.append(np.asarray(getattr(extra, "data", extra), dtype=np.float32))
    image = np.stack(chans).astype(np.float32)
    lab = None if labels is None else labels.data
    return Case(case_id, image, lab, first.spacing_mm, first.origin_mm)


def load_case(path, with_labels=True, normalize=True):
    volumes, labels = read_case_volumes(path, with_labels)
    return prepare_case(os.path.basename(os.path.normpath(path)), volumes, labels, normalize)


def list_cases(directory):
    try:
        names = sorted(
            d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d))
        )
    except OSError as exc:
        raise IOFailure(f"cannot list {directory}: {exc}") from exc
    return names
