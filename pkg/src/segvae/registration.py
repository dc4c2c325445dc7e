"""Affine template registration and the searchlight Pearson similarity map."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, ShapeError
from .volume_io import Volume

VAR_EPS = 1e-12


@dataclass
class AffineTransform:
    """Scale, then Euler-xyz rotation, about ``center_mm``, then translation.

    Maps moving-space mm coordinates onto the output grid:
    ``p' = R @ diag(scale) @ (p - c) + c + t``. When ``center_mm`` is None
    the centre of whichever output grid it is applied on is used.
    """

    translation_mm: tuple = (0.0, 0.0, 0.0)
    rotation_rad: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    center_mm: tuple | None = None

    def __post_init__(self):
        self.translation_mm = tuple(float(v) for v in self.translation_mm)
        self.rotation_rad = tuple(float(v) for v in self.rotation_rad)
        self.scale = tuple(float(v) for v in self.scale)
        if any(not 0.5 <= s <= 2.0 for s in self.scale):
            raise ValueError(f"scale components must lie in [0.5, 2.0], got {self.scale}")

    def linear(self):
        ax, ay, az = self.rotation_rad
        cx, sx = math.cos(ax), math.sin(ax)
        cy, sy = math.cos(ay), math.sin(ay)
        cz, sz = math.cos(az), math.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return rz @ ry @ rx @ np.diag(self.scale)

    @classmethod
    def identity(cls):
        return cls()


def grid_center(shape, spacing_mm, origin_mm):
    return tuple(o + (n - 1) / 2 * s for n, s, o in zip(shape, spacing_mm, origin_mm))


def resample(v: Volume, t: AffineTransform, out_grid=None) -> Volume:
    """Pull ``v`` onto ``out_grid`` through ``t``: each output voxel centre is
    mapped by the inverse transform into ``v``'s mm space and sampled
    trilinearly; points outside ``v`` read 0.

    ``out_grid`` is any object with ``shape``, ``spacing_mm`` and ``origin_mm``
    (defaults to ``v`` itself).
    """
    grid = out_grid if out_grid is not None else v
    shape = tuple(grid.shape)
    sp = np.asarray(grid.spacing_mm, dtype=np.float64)
    org = np.asarray(grid.origin_mm, dtype=np.float64)
    c = np.asarray(t.center_mm if t.center_mm is not None else grid_center(shape, sp, org))
    inv = np.linalg.inv(t.linear())
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    pts = org[:, None] + idx * sp[:, None]
    src = inv @ (pts - c[:, None] - np.asarray(t.translation_mm)[:, None]) + c[:, None]
    vidx = (src - np.asarray(v.origin_mm)[:, None]) / np.asarray(v.spacing_mm)[:, None]
    out = ndimage.map_coordinates(v.data.astype(np.float64), vidx, order=1, mode="constant", cval=0.0)
    return Volume(out.reshape(shape).astype(np.float32), tuple(sp), tuple(org))


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def _downsample(v: Volume, f):
    if f == 1:
        return v
    shape = tuple((n // f) * f for n in v.shape)
    d = v.data[: shape[0], : shape[1], : shape[2]].astype(np.float64)
    d = d.reshape(shape[0] // f, f, shape[1] // f, f, shape[2] // f, f).mean(axis=(1, 3, 5))
    sp = tuple(s * f for s in v.spacing_mm)
    org = tuple(o + (f - 1) / 2 * s for o, s in zip(v.origin_mm, v.spacing_mm))
    return Volume(d.astype(np.float32), sp, org)


@dataclass
class RegistrationResult:
    transform: AffineTransform
    correlation: float


# (translation step mm, rotation step rad, scale step) per coarse-to-fine level
SEARCH_LEVELS = ((4.0, 0.05, 0.05), (2.0, 0.025, 0.025), (1.0, 0.0125, 0.0125))
TRANSLATION_RANGE = 20.0
ROTATION_RANGE = 0.2
SCALE_RANGE = (0.9, 1.1)


def _grid_values(lo, hi, step, around=None, width=None):
    n = int(round((hi - lo) / step))
    vals = lo + step * np.arange(n + 1)
    if around is not None:
        vals = vals[np.abs(vals - around) <= width + 1e-9]
    return [float(round(v, 10)) for v in vals]


def _working_pair(moving, fixed, f, sigma_mm):
    out = []
    for v in (moving, fixed):
        w = _downsample(v, f)
        if sigma_mm > 0:
            sig = [sigma_mm / s for s in w.spacing_mm]
            w = replace(w, data=ndimage.gaussian_filter(w.data.astype(np.float64), sig, mode="constant").astype(np.float32))
        out.append(w)
    return out


def affine_register(moving: Volume, fixed: Volume, max_working_dim=64) -> RegistrationResult:
    """Find the transform that best aligns ``moving`` onto ``fixed``.

    Maximizes the global Pearson correlation between ``resample(moving, t,
    fixed)`` and ``fixed`` by a deterministic coarse-to-fine grid search over
    translations (+-20 mm), Euler rotations (+-0.2 rad), an isotropic scale
    and then per-axis scales (0.9-1.1), with steps 4/2/1 mm, 0.05/0.025/0.0125
    rad and 0.05/0.025/0.0125.

    Stage one places the translation alone: a joint grid at the coarse step,
    then coordinate refinement at the finer steps. Stage two repeats the
    coarse-to-fine ladder over all nine parameters with coordinate sweeps
    (rotation and scale windows start at the full range, later levels search
    +-2 steps around the incumbent). Coarse levels compare block-averaged,
    Gaussian-smoothed copies (sigma = half the translation step) so a coarse
    grid still sees a smooth basin; the last level is unsmoothed.
    """
    for name, v in (("moving", moving), ("fixed", fixed)):
        if float(v.data.max()) == float(v.data.min()):
            raise DegenerateInputError(f"affine_register: {name} volume is constant")
    center = grid_center(fixed.shape, fixed.spacing_mm, fixed.origin_mm)
    coarse_f = max(1, math.ceil(max(fixed.shape) / max_working_dim))
    fine_f = max(1, math.ceil(max(fixed.shape) / (2 * max_working_dim)))
    seed_f = max(1, math.ceil(max(fixed.shape) / (max_working_dim // 2)))
    last = len(SEARCH_LEVELS) - 1
    working = {}

    def pair(level):
        if level not in working:
            if level == "seed":
                working[level] = _working_pair(moving, fixed, seed_f, SEARCH_LEVELS[0][0] / 2)
            elif level < last:
                working[level] = _working_pair(moving, fixed, coarse_f, SEARCH_LEVELS[level][0] / 2)
            else:
                working[level] = _working_pair(moving, fixed, fine_f, 0.0)
        return working[level]

    def make(p):
        return AffineTransform(p[0:3], p[3:6], p[6:9], center)

    def scorer(level):
        mv, fx = pair(level)
        return lambda p: pearson(resample(mv, make(p), fx).data, fx.data)

    # parameter vector: tx ty tz rx ry rz sx sy sz
    params = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]

    score = scorer("seed")
    best = score(params)
    t_vals = _grid_values(-TRANSLATION_RANGE, TRANSLATION_RANGE, SEARCH_LEVELS[0][0])
    for tx in t_vals:
        for ty in t_vals:
            for tz in t_vals:
                p = [tx, ty, tz] + params[3:]
                sc = score(p)
                if sc > best + 1e-12:
                    best, params = sc, p

    def sweep(groups, score, best, windowed):
        nonlocal params
        for _ in range(4):
            improved = False
            for idx, lo, hi, step in groups:
                for p in _candidates(params, idx, lo, hi, step, windowed):
                    sc = score(p)
                    if sc > best + 1e-12:
                        best, params, improved = sc, p, True
            if not improved:
                break

    for level in range(1, last + 1):
        t_step = SEARCH_LEVELS[level][0]
        groups = [(i, -TRANSLATION_RANGE, TRANSLATION_RANGE, t_step) for i in range(3)]
        score = scorer(level)
        sweep(groups, score, score(params), True)

    for level, (t_step, r_step, s_step) in enumerate(SEARCH_LEVELS):
        groups = [(i, -TRANSLATION_RANGE, TRANSLATION_RANGE, t_step) for i in range(3)]
        groups += [(i, -ROTATION_RANGE, ROTATION_RANGE, r_step) for i in range(3, 6)]
        groups += [("iso", *SCALE_RANGE, s_step)] + [(i, *SCALE_RANGE, s_step) for i in range(6, 9)]
        score = scorer(level)
        sweep(groups, score, score(params), level > 0)

    final = make(params)
    return RegistrationResult(final, pearson(resample(moving, final, fixed).data, fixed.data))


def _candidates(params, idx, lo, hi, step, windowed):
    """Single-coordinate moves on the step grid (within +-2 steps when ``windowed``)."""
    if idx == "iso":
        base = params[6:9]
        ref = float(np.mean(base))
        vals = _grid_values(lo, hi, step, ref if windowed else None, 2 * step)
        trials = [params[:6] + [b * c / ref for b in base] for c in vals if c != ref]
        return [p for p in trials if all(lo - 1e-9 <= s <= hi + 1e-9 for s in p[6:9])]
    cur = params[idx]
    out = []
    for val in _grid_values(lo, hi, step, cur if windowed else None, 2 * step):
        if val != cur:
            p = list(params)
            p[idx] = val
            out.append(p)
    return out


# ---------------------------------------------------------------- searchlight

def _sphere_runs(radius_mm, spacing):
    """For each (dy, dz) inside the sphere, the half-width of its x run."""
    sx, sy, sz = spacing
    ry, rz = int(radius_mm // sy), int(radius_mm // sz)
    runs = []
    r2 = radius_mm * radius_mm
    for dy in range(-ry, ry + 1):
        for dz in range(-rz, rz + 1):
            rest = r2 - (dy * sy) ** 2 - (dz * sz) ** 2
            if rest < -1e-9:
                continue
            hx = int(math.floor(math.sqrt(max(rest, 0.0)) / sx + 1e-9))
            runs.append((dy, dz, hx))
    return runs


def sphere_offsets(radius_mm, spacing):
    """All integer voxel offsets whose centre distance is <= ``radius_mm`` (boundary inclusive)."""
    return [(dx, dy, dz) for dy, dz, hx in _sphere_runs(radius_mm, spacing) for dx in range(-hx, hx + 1)]


def _sphere_sum(f, runs):
    """Sum of ``f`` over the sphere around each voxel, ignoring out-of-grid voxels."""
    X, Y, Z = f.shape
    prefix = np.zeros((X + 1, Y, Z), dtype=np.float64)
    np.cumsum(f, axis=0, out=prefix[1:])
    xs = np.arange(X)
    out = np.zeros(f.shape, dtype=np.float64)
    cache = {}
    for dy, dz, hx in runs:
        if hx not in cache:
            hi = np.minimum(xs + hx + 1, X)
            lo = np.maximum(xs - hx, 0)
            cache[hx] = prefix[hi] - prefix[lo]
        run = cache[hx]
        ys = slice(max(0, -dy), min(Y, Y - dy))
        zs = slice(max(0, -dz), min(Z, Z - dz))
        ys_src = slice(max(0, dy), min(Y, Y + dy))
        zs_src = slice(max(0, dz), min(Z, Z + dz))
        out[:, ys, zs] += run[:, ys_src, zs_src]
    return out


def searchlight_pearson(a: Volume, b: Volume, radius_mm=7.0) -> Volume:
    """Local Pearson correlation of ``a`` and ``b`` over a sphere at every voxel.

    Voxels where either local variance is negligible (below 1e-12 relative to
    the local mean square, or absolute when that is < 1) map to 0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"searchlight_pearson: grids differ {a.shape} vs {b.shape}")
    runs = _sphere_runs(radius_mm, a.spacing_mm)
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    n = _sphere_sum(np.ones_like(x), runs)
    sx, sy = _sphere_sum(x, runs), _sphere_sum(y, runs)
    sxx, syy, sxy = _sphere_sum(x * x, runs), _sphere_sum(y * y, runs), _sphere_sum(x * y, runs)
    mx, my = sx / n, sy / n
    vx = sxx / n - mx * mx
    vy = syy / n - my * my
    cov = sxy / n - mx * my
    ok = (vx > VAR_EPS * np.maximum(1.0, sxx / n)) & (vy > VAR_EPS * np.maximum(1.0, syy / n))
    r = np.zeros(a.shape, dtype=np.float64)
    r[ok] = cov[ok] / np.sqrt(vx[ok] * vy[ok])
    np.clip(r, -1.0, 1.0, out=r)
    return replace(a, data=r.astype(np.float32))


def normalize_map(m: Volume, method="minmax") -> Volume:
    """Rescale to [0, 1] (``minmax``) or to zero mean, unit variance (``zscore``)."""
    d = m.data.astype(np.float64)
    lo, hi = float(d.min()), float(d.max())
    if hi == lo:
        raise DegenerateInputError("normalize_map: constant map")
    if method == "minmax":
        out = (d - lo) / (hi - lo)
    elif method == "zscore":
        out = (d - d.mean()) / d.std()
    else:
        raise ValueError(f"unknown normalization {method!r}")
    return replace(m, data=out.astype(np.float32))


@dataclass
class SimilarityResult:
    raw: Volume
    normalized: Volume
    registration: RegistrationResult
    radius_mm: float


def similarity_map(t1: Volume, template: Volume, radius_mm=7.0) -> SimilarityResult:
    """Register ``template`` to ``t1``, then map their local correlation onto ``t1``'s grid."""
    reg = affine_register(template, t1)
    aligned = resample(template, reg.transform, t1)
    raw = searchlight_pearson(t1, aligned, radius_mm)
    return SimilarityResult(raw, normalize_map(raw), reg, radius_mm)
