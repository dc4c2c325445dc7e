import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from segvae.data import (
    Case, CaseSample, RegionMasks, augment_flip, augment_scale, average_tumor_template, make_phantom,
    mirrored_patch, patch_grid, region_decode, region_encode, rng_stream, sample_patch, select_crop,
)
from segvae.errors import ArgumentError, BoundsError, DataError
from segvae.volume_io import LabelVolume


def _random_labels(rng, shape=(6, 5, 4)):
    return rng.choice(np.array([0, 1, 2, 4], dtype=np.uint8), size=shape)


# ---------------------------------------------------------------- regions

def test_region_encode_examples():
    m = region_encode(np.zeros((3, 3, 3), np.uint8))
    assert not (m.wt.any() or m.tc.any() or m.et.any())
    lab = np.zeros((3, 3, 3), np.uint8)
    lab[1, 1, 1] = 4
    m = region_encode(lab)
    assert m.wt[1, 1, 1] and m.tc[1, 1, 1] and m.et[1, 1, 1]
    lab = np.zeros((3, 3, 3), np.uint8)
    lab[0, 0, 0], lab[1, 0, 0], lab[2, 0, 0] = 1, 2, 4
    m = region_encode(LabelVolume(lab))
    assert (m.wt.sum(), m.tc.sum(), m.et.sum()) == (3, 2, 1)
    assert m.is_nested()


def test_region_encode_rejects_illegal_label():
    lab = np.zeros((3, 3, 3), np.uint8)
    lab[2, 1, 0] = 3
    with pytest.raises(DataError, match=r"\(2, 1, 0\)"):
        region_encode(lab)


def test_region_decode_examples(rng):
    wt = np.zeros((2, 2, 2), bool)
    wt[0, 0, 0] = True
    assert region_decode(RegionMasks(wt, np.zeros_like(wt), np.zeros_like(wt))).data[0, 0, 0] == 2
    tc = np.zeros_like(wt)
    tc[1, 1, 1] = True  # outside wt
    out = region_decode(RegionMasks(wt, tc, np.zeros_like(wt))).data
    assert out[1, 1, 1] == 1 and out[0, 0, 0] == 2
    for _ in range(20):
        lab = _random_labels(rng)
        assert np.array_equal(region_decode(region_encode(lab)).data, lab)
        m = region_encode(lab)
        assert region_encode(region_decode(m)) == m


# ---------------------------------------------------------------- template and crop

def test_average_tumor_template(rng):
    one = rng.random((4, 4, 4)) < 0.3
    assert np.array_equal(average_tumor_template([one]), one.astype(float))
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[0], b[1] = True, True
    t = average_tumor_template([a, b])
    assert np.all(t[0] == 0.5) and np.all(t[1] == 0.5) and np.all(t[2:] == 0)
    masks = [rng.random((7, 6, 5)) < 0.4 for _ in range(10)]
    brute = np.zeros((7, 6, 5))
    for m in masks:
        brute += m
    assert np.max(np.abs(average_tumor_template(masks) - brute / 10)) <= 1e-7
    with pytest.raises(ArgumentError):
        average_tumor_template([])


def _brute_crop(t, win):
    best, arg = -np.inf, None
    for o in itertools.product(*(range(n - w + 1) for n, w in zip(t.shape, win))):
        s = t[o[0]:o[0] + win[0], o[1]:o[1] + win[1], o[2]:o[2] + win[2]].sum()
        if s > best + 1e-9:
            best, arg = s, o
    return arg


def test_select_crop_examples(rng):
    t = np.zeros((10, 10, 10))
    t[7:, 8:, 6:] = 1
    assert select_crop(t, (3, 2, 4)) == (7, 8, 6)
    assert select_crop(np.ones((9, 9, 9)), (4, 4, 4)) == (0, 0, 0)
    with pytest.raises(BoundsError):
        select_crop(t, (11, 2, 2))
    for _ in range(3):
        t = rng.random((20, 20, 20))
        assert select_crop(t, (8, 8, 8)) == _brute_crop(t, (8, 8, 8))


def test_select_crop_binary_ties_match_brute_force(rng):
    for _ in range(5):
        t = (rng.random((9, 8, 7)) < 0.2).astype(float)
        assert select_crop(t, (3, 4, 2)) == _brute_crop(t, (3, 4, 2))


# ---------------------------------------------------------------- patch grid

def test_patch_grid_examples():
    axis = lambda d: sorted({o[0] for o in patch_grid((d, 80, 80), (80, 80, 80)).offsets})
    assert axis(160) == [0, 80]
    assert axis(190) == [0, 55, 110]
    assert axis(80) == [0]
    plan = patch_grid((160, 190, 140), (80, 80, 80))
    assert len(plan.offsets) == 2 * 3 * 2
    with pytest.raises(BoundsError):
        patch_grid((60, 90, 90), (80, 80, 80))


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 12)] * 3), st.tuples(*[st.integers(0, 20)] * 3))
def test_patch_grid_covers_volume(patch, extra):
    shape = tuple(p + e for p, e in zip(patch, extra))
    plan = patch_grid(shape, patch)
    cover = np.zeros(shape, bool)
    for o in plan.offsets:
        assert all(0 <= oi and oi + p <= s for oi, p, s in zip(o, patch, shape))
        cover[o[0]:o[0] + patch[0], o[1]:o[1] + patch[1], o[2]:o[2] + patch[2]] = True
    assert cover.all()


# ---------------------------------------------------------------- sampling

def _case(rng, shape=(12, 12, 12), tumor=True):
    lab = np.zeros(shape, np.uint8)
    if tumor:
        lab[1:3, 1:3, 1:3] = 2
        lab[2, 2, 2] = 4
    return Case("c", rng.standard_normal((4,) + shape).astype(np.float32), lab)


def test_sample_patch_positive_bias(rng):
    case = _case(rng)
    plan = patch_grid(case.shape, (4, 4, 4))
    for _ in range(200):
        s = sample_patch(case, plan, rng, p_pos=1.0)
        assert s.regions[0].any()
        assert s.channels.shape == (4, 4, 4, 4)


def test_sample_patch_fallback_without_tumor(rng):
    case = _case(rng, tumor=False)
    plan = patch_grid(case.shape, (4, 4, 4))
    s = sample_patch(case, plan, rng, p_pos=1.0)
    assert not s.regions.any()
    with pytest.raises(ArgumentError):
        sample_patch(case, plan, rng, p_pos=1.5)


def test_sample_patch_uniform_without_bias(rng):
    case = _case(rng)
    plan = patch_grid(case.shape, (4, 4, 4))
    index = {o: i for i, o in enumerate(plan.offsets)}
    counts = np.zeros(len(plan.offsets))
    for _ in range(10000):
        counts[index[sample_patch(case, plan, rng, p_pos=0.0).offset]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sample_patch_mirror_channels(rng):
    case = _case(rng)
    plan = patch_grid(case.shape, (4, 4, 4))
    s = sample_patch(case, plan, rng, mirror=True)
    assert s.channels.shape[0] == 8
    assert np.array_equal(s.channels[4:], mirrored_patch(case.image, s.offset, (4, 4, 4)))


# ---------------------------------------------------------------- augmentation

def _sample(rng):
    lab = _random_labels(rng, (5, 6, 7))
    return CaseSample(rng.standard_normal((4, 5, 6, 7)).astype(np.float32), region_encode(lab).as_array()), lab


def test_flip_properties(rng):
    s, lab = _sample(rng)
    a = augment_flip(s, rng_stream(0, "flip"))
    b = augment_flip(s, rng_stream(0, "flip"))
    assert np.array_equal(a.channels, b.channels) and a.flips == b.flips
    for c in range(4):
        assert np.array_equal(np.sort(a.channels[c], axis=None), np.sort(s.channels[c], axis=None))
    axes = tuple(i for i, f in enumerate(a.flips) if f)
    flipped_lab = np.flip(lab, axis=axes) if axes else lab
    assert np.array_equal(a.regions, region_encode(flipped_lab).as_array())
    # flipping with the same draw again undoes it
    back = augment_flip(a, rng_stream(0, "flip"))
    assert np.array_equal(back.channels, s.channels) and back.flips == (False,) * 3


def test_flip_frequency(rng):
    s, _ = _sample(rng)
    hits = np.zeros(3)
    for _ in range(2000):
        hits += augment_flip(s, rng).flips
    assert np.all(np.abs(hits / 2000 - 0.5) < 0.05)


def test_scale_properties(rng):
    s, _ = _sample(rng)
    s.channels[:, 0] = 0
    out = augment_scale(s, rng)
    assert np.all(out.channels[:, 0] == 0)
    assert np.array_equal(out.regions, s.regions)
    assert 0.9 <= out.scale <= 1.1
    assert np.allclose(out.channels, s.channels * np.float32(out.scale), rtol=1e-6)
    same = augment_scale(s, rng, 1.0, 1.0)
    assert np.array_equal(same.channels, s.channels)
    r = rng_stream(7, "scale")
    f = [augment_scale(s, r).scale for _ in range(10000)]
    assert abs(np.mean(f) - 1.0) <= 0.005


# ---------------------------------------------------------------- mirrored patches

def test_mirrored_patch_symmetric_volume(rng):
    half = rng.standard_normal((2, 5, 6, 4))
    vol = np.concatenate([half, np.flip(half, axis=1)], axis=1)
    assert np.allclose(mirrored_patch(vol, (1, 2, 0), (3, 3, 3)), vol[:, 1:4, 2:5, 0:3])


def test_mirrored_patch_center_and_involution(rng):
    vol = rng.standard_normal((9, 6, 6))
    p = mirrored_patch(vol, (3, 0, 0), (3, 6, 6))
    assert np.array_equal(p, np.flip(vol[3:6], axis=0))
    vol = rng.standard_normal((2, 11, 7, 5))
    off, patch = (2, 1, 0), (4, 4, 5)
    once = mirrored_patch(vol, off, patch)
    mx = 11 - 2 - 4
    assert np.array_equal(once, np.flip(vol[:, mx:mx + 4, 1:5, 0:5], axis=1))
    twice = mirrored_patch(vol, (mx, 1, 0), patch)
    assert np.array_equal(np.flip(twice, axis=1), vol[:, 2:6, 1:5, 0:5])


# ---------------------------------------------------------------- phantoms

def test_phantom_contract():
    vols, lab = make_phantom(rng_stream(5, "p"), (32, 34, 36))
    assert set(vols) == {"t1", "t1ce", "t2", "flair"}
    assert region_encode(lab).is_nested()
    brain = vols["t1"].data != 0
    for v in vols.values():
        assert v.shape == (32, 34, 36)
        assert np.all(v.data[~brain] == 0)
    vols2, lab2 = make_phantom(rng_stream(5, "p"), (32, 34, 36))
    assert np.array_equal(lab.data, lab2.data)
    assert all(np.array_equal(vols[k].data, vols2[k].data) for k in vols)
    with pytest.raises(ArgumentError):
        make_phantom(rng_stream(0), (31, 40, 40))


def test_phantom_tumor_fraction():
    fractions = []
    for seed in range(100):
        vols, lab = make_phantom(rng_stream(seed, "phantom"), (32, 32, 32))
        brain = vols["t1"].data != 0
        fractions.append((lab.data > 0).sum() / brain.sum())
    assert 0.01 <= min(fractions) and max(fractions) <= 0.10


def test_rng_stream_independence():
    a = rng_stream(1, "x", 0).random(4)
    assert np.array_equal(a, rng_stream(1, "x", 0).random(4))
    assert not np.array_equal(a, rng_stream(1, "x", 1).random(4))
    assert not np.array_equal(a, rng_stream(2, "x", 0).random(4))
