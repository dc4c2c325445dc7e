import math

import numpy as np
import pytest

from segvae.data import RegionMasks
from segvae.errors import ArgumentError, ShapeError
from segvae.metrics import (
    CSV_COLUMNS, aggregate, case_metrics, dice_score, error_map, hausdorff95, metrics_csv, parse_metrics_csv,
    sensitivity_specificity, surface_voxels,
)


def _brute_surface(m):
    out = np.zeros_like(m)
    X, Y, Z = m.shape
    for x, y, z in np.argwhere(m):
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = x + dx, y + dy, z + dz
            if not (0 <= a < X and 0 <= b < Y and 0 <= c < Z) or not m[a, b, c]:
                out[x, y, z] = True
    return out


def _brute_hd95(p, t, sp):
    a = np.argwhere(_brute_surface(p)) * np.asarray(sp)
    b = np.argwhere(_brute_surface(t)) * np.asarray(sp)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))

    def p95(v):
        v = np.sort(v)
        return v[math.ceil(0.95 * len(v)) - 1]

    return max(p95(d.min(1)), p95(d.min(0)))


def test_dice_examples():
    p = np.zeros(200, bool)
    t = np.zeros(200, bool)
    p[:100], t[50:150] = True, True
    assert dice_score(p, t) == 0.5
    assert dice_score(p, p) == 1.0
    assert dice_score(np.zeros(5, bool), np.zeros(5, bool)) == 1.0
    assert dice_score(np.ones(5, bool), np.zeros(5, bool)) == 0.0
    with pytest.raises(ShapeError):
        dice_score(np.zeros(3), np.zeros(4))


def test_sens_spec_examples():
    p = np.zeros(1000, bool)
    t = np.zeros(1000, bool)
    t[:100] = True
    p[50:160] = True  # TP 50, FN 50, FP 60 -> trim FP to 10 below
    p[110:160] = False
    p[100:110] = True
    sens, spec = sensitivity_specificity(p, t)
    assert sens == 0.5 and abs(spec - 890 / 900) <= 1e-12 and abs(spec - 0.98889) <= 1e-5
    assert sensitivity_specificity(t, t) == (1.0, 1.0)
    assert sensitivity_specificity(np.zeros_like(t), t) == (0.0, 1.0)


def test_set_arithmetic_oracle(rng):
    for _ in range(50):
        p, t = rng.random((6, 5, 4)) < 0.4, rng.random((6, 5, 4)) < 0.3
        P = {tuple(i) for i in np.argwhere(p)}
        T = {tuple(i) for i in np.argwhere(t)}
        U = {tuple(i) for i in np.ndindex(6, 5, 4)}
        d = 1.0 if not P and not T else 2 * len(P & T) / (len(P) + len(T))
        assert dice_score(p, t) == d
        sens, spec = sensitivity_specificity(p, t)
        assert sens == (len(P & T) / len(T) if T else 1.0)
        assert spec == (len((U - P) - T) / len(U - T) if U - T else 1.0)
        assert dice_score(p, t) == dice_score(t, p)


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 1, 1], b[4, 5, 1] = True, True
    assert hausdorff95(a, b) == 5.0
    assert hausdorff95(a, a) == 0.0
    assert hausdorff95(a, np.zeros_like(a)) is None
    assert hausdorff95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(math.hypot(6, 4))


def test_hd95_brute_force(rng):
    for i in range(30):
        shape = tuple(int(s) for s in rng.integers(3, 13, 3))
        p, t = rng.random(shape) < rng.uniform(0.05, 0.6), rng.random(shape) < rng.uniform(0.05, 0.6)
        if not p.any() or not t.any():
            continue
        sp = (1.0, 1.0, 1.0) if i % 2 else tuple(rng.uniform(0.5, 2.0, 3))
        assert hausdorff95(p, t, sp) == _brute_hd95(p, t, sp)
        assert hausdorff95(p, t, sp) == hausdorff95(t, p, sp)


def test_surface_voxels(rng):
    m = rng.random((6, 7, 5)) < 0.6
    assert np.array_equal(surface_voxels(m), _brute_surface(m))
    full = np.ones((3, 3, 3), bool)
    assert surface_voxels(full).sum() == 26


def test_translation_invariance(rng):
    p, t = np.zeros((12, 12, 12), bool), np.zeros((12, 12, 12), bool)
    p[2:5, 2:6, 3:5], t[3:6, 2:5, 2:6] = True, True
    shift = lambda m: np.roll(m, (2, 3, 1), axis=(0, 1, 2))
    assert hausdorff95(p, t) == hausdorff95(shift(p), shift(t))
    assert dice_score(p, t) == dice_score(shift(p), shift(t))


def _case(cid, v):
    masks = RegionMasks(*[np.ones((2, 2, 2), bool)] * 3)
    c = case_metrics(cid, masks, masks)
    for m in ("dice", "sens", "spec", "hd95"):
        for r in ("et", "wt", "tc"):
            getattr(c, m)[r] = v
    return c


def test_aggregate_examples():
    rep = aggregate([_case("a", 1.0), _case("b", 2.0), _case("c", 3.0)])
    assert rep.mean["dice_wt"] == 2.0 and rep.std["dice_wt"] == 1.0 and rep.median["dice_wt"] == 2.0
    rep = aggregate([_case(str(i), float(i)) for i in (1, 2, 3, 4)])
    assert rep.median["hd95_et"] == 2.5
    one = aggregate([_case("a", 0.7)])
    assert one.mean["sens_tc"] == one.median["sens_tc"] == 0.7 and one.std["sens_tc"] == 0.0
    with pytest.raises(ArgumentError):
        aggregate([])


def test_aggregate_excludes_undefined_hd95():
    cases = [_case("a", 1.0), _case("b", 3.0)]
    cases[1].hd95["et"] = None
    rep = aggregate(cases)
    assert rep.mean["hd95_et"] == 1.0 and rep.excluded["hd95_et"] == 1 and rep.excluded["hd95_wt"] == 0


def test_case_metrics_empty_et():
    z = np.zeros((4, 4, 4), bool)
    t = z.copy()
    t[1:3, 1:3, 1:3] = True
    truth = RegionMasks(t, t, z)
    pred = RegionMasks(t, t, t)
    c = case_metrics("x", pred, truth)
    assert c.dice["et"] == 0.0 and c.hd95["et"] is None and c.dice["wt"] == 1.0


def test_csv_round_trip(rng):
    cases = [_case(f"c{i}", float(v)) for i, v in enumerate(rng.random(5))]
    cases[2].hd95["tc"] = None
    text = metrics_csv(aggregate(cases))
    assert text.splitlines()[0].split(",") == CSV_COLUMNS
    rows, aggs = parse_metrics_csv(text)
    assert list(rows) == [f"c{i}" for i in range(5)]
    assert rows["c2"]["hd95_tc"] is None
    for col in CSV_COLUMNS[1:]:
        vals = np.array([r[col] for r in rows.values() if r[col] is not None])
        assert abs(aggs["mean"][col] - vals.mean()) <= 1e-9
        assert abs(aggs["std"][col] - vals.std(ddof=1)) <= 1e-9
        assert abs(aggs["median"][col] - np.median(vals)) <= 1e-9


def test_error_map(rng):
    m = rng.random((8, 8, 8)) < 0.5
    assert not error_map([(m, m), (m, m)]).any()
    single = m.copy()
    single[3, 4, 5] ^= True
    e = error_map([(single, m)])
    assert e[3, 4, 5] == 1 and e.sum() == 1
    pairs = [(rng.random((8, 8, 8)) < 0.5, rng.random((8, 8, 8)) < 0.5) for _ in range(5)]
    direct = sum(np.logical_xor(p, t).astype(float) for p, t in pairs) / 5
    assert np.max(np.abs(error_map(pairs) - direct)) <= 1e-7
    with pytest.raises(ShapeError):
        error_map([(m, m), (m[:4], m[:4])])
