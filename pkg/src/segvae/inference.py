"""Sliding-window prediction with flip TTA, ensemble averaging and memory accounting.

Models only need a ``config`` attribute and a ``predict(x) -> [3, *patch]``
method, so probe models can stand in for the network in tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import RegionMasks, extract, region_decode
from .errors import ConfigError, ShapeError
from .nn.tensor import memory_tracking, track

FLIP_VARIANTS = tuple(itertools.product((False, True), repeat=3))
ACCUMULATOR_DTYPE = np.float64


@dataclass
class Thresholds:
    wt: float = 0.55
    tc: float = 0.5
    et: float = 0.4

    def __post_init__(self):
        for name in ("wt", "tc", "et"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"threshold {name}={v} must lie in (0, 1)")

    def as_text(self):
        return f"{self.wt!r},{self.tc!r},{self.et!r}"


@dataclass
class ProbMaps:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray


@dataclass
class MemoryBudget:
    peak_live_bytes: int
    budget_bytes: int | None


@dataclass
class Prediction:
    probs: ProbMaps
    masks: RegionMasks
    labels: object
    memory: MemoryBudget
    counts: np.ndarray
    estimates_per_patch: int


def _flip(x, flips):
    axes = tuple(ax for ax, f in zip((-3, -2, -1), flips) if f)
    return np.flip(x, axis=axes) if axes else x


def tta_variants(x):
    """The 8 axis-flip combinations of ``x`` paired with the flips that undo them."""
    return [(_flip(x, flips), flips) for flips in FLIP_VARIANTS]


def undo_variant(y, flips):
    return _flip(y, flips)


def threshold_and_nest(p: ProbMaps, t: Thresholds | None = None) -> RegionMasks:
    """Inclusive thresholds per region, then et -> tc -> wt repair by union."""
    t = t or Thresholds()
    return RegionMasks(p.wt >= t.wt, p.tc >= t.tc, p.et >= t.et).repaired()


def check_ensemble(models):
    if not models:
        raise ConfigError("at least one model is required")
    first = models[0].config
    for m in models[1:]:
        if m.config != first:
            raise ConfigError("ensemble members have different model configs")
    return first


def patch_footprint(model, channels=None):
    """Peak tracked bytes of one infer-mode forward on a single patch (input included)."""
    cfg = model.config
    c = cfg.in_channels if channels is None else channels
    with memory_tracking() as tracker:
        x = track(np.zeros((c,) + cfg.patch, np.float32), "patch")
        y = model.predict(x)
        del x, y
    return tracker.peak


def default_budget(models, image_shape):
    """One patch of activations + two float accumulators per region + inputs, plus 10%."""
    footprint = max(patch_footprint(m) for m in models)
    voxels = int(np.prod(image_shape[1:]))
    accumulators = 2 * 3 * voxels * np.dtype(ACCUMULATOR_DTYPE).itemsize
    inputs = int(np.prod(image_shape)) * 4
    return int(1.1 * (footprint + accumulators + inputs))


def sliding_window_predict(models, image, plan, tta=True, thresholds=None, budget_bytes=None,
                           spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)):
    """Predict region probabilities over ``image[C, X, Y, Z]`` patch by patch.

    Every (patch, flip variant, model) triple contributes one estimate; each
    voxel's probability is the plain mean of all estimates covering it.
    Patches are processed strictly one after another so the live footprint
    stays at one patch of activations plus the accumulators.
    """
    cfg = check_ensemble(models)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 4 or image.shape[0] != cfg.in_channels:
        raise ShapeError(f"image {image.shape} does not match in_channels={cfg.in_channels}")
    if tuple(image.shape[1:]) != tuple(plan.volume_shape) or tuple(plan.patch_shape) != cfg.patch:
        raise ShapeError("patch plan does not match the image grid or the model patch")
    variants = FLIP_VARIANTS if tta else FLIP_VARIANTS[:1]
    per_patch = len(variants) * len(models)
    shape = tuple(image.shape[1:])

    with memory_tracking(budget_bytes) as tracker:
        track(image, "inputs")
        acc = track(np.zeros((3,) + shape, ACCUMULATOR_DTYPE), "accumulators.sum")
        counts = track(np.zeros(shape, ACCUMULATOR_DTYPE), "accumulators.count")
        for off in plan.offsets:
            x = track(np.ascontiguousarray(extract(image, off, plan.patch_shape)), "patch")
            acc_view = extract(acc, off, plan.patch_shape)
            for flips in variants:
                xf = track(np.ascontiguousarray(_flip(x, flips)), "patch.tta")
                for model in models:
                    y = model.predict(xf)
                    acc_view += undo_variant(y, flips)
                    del y
                del xf
            extract(counts, off, plan.patch_shape)[...] += per_patch
            del x, acc_view
        acc /= counts
        probs = ProbMaps(acc[0], acc[1], acc[2])
        peak = tracker.peak

    masks = threshold_and_nest(probs, thresholds)
    labels = region_decode(masks, spacing_mm, origin_mm)
    return Prediction(probs, masks, labels, MemoryBudget(peak, budget_bytes), counts, per_patch)
