
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrde import gem
from rrde.gem import DegenerateGeometryError, FaceRecord


def rec(f=0.0, x=None, area=1.0, c=(0.0, 0.0)):
    return FaceRecord(f, None if x is None else np.asarray(x, dtype=float), area, c)


# ---------------------------------------------------------------- mean estimation / encoding

def test_mean_estimation_examples():
    assert gem.mean_estimation([rec(2), rec(4)]) == 3.0
    assert gem.mean_estimation([rec(1.7)]) == 1.7
    assert gem.mean_estimation([rec(v) for v in range(6)]) == 2.5
    with pytest.raises(ValueError):
        gem.mean_estimation([])


def test_mean_encoding_examples():
    v = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(gem.mean_encoding([rec(x=v), rec(x=v), rec(x=v)]), v)
    e1 = np.eye(4)[0]
    np.testing.assert_array_equal(gem.mean_encoding([rec(x=e1), rec(x=-e1)]), np.zeros(4))
    X = np.random.default_rng(0).standard_normal((3, 128))
    ref = np.array([sum(X[i, k] for i in range(3)) / 3 for k in range(128)])
    np.testing.assert_allclose(gem.mean_encoding([rec(x=r) for r in X]), ref, atol=1e-12, rtol=0)


def test_mean_encoding_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        gem.mean_encoding([rec(x=[1.0, 2.0]), rec(x=[1.0])])
    with pytest.raises(ValueError):
        gem.mean_encoding([])


# ---------------------------------------------------------------- significance

def test_significance_single_face_is_one():
    for area in (1.0, 37.5, 1e6):
        np.testing.assert_array_equal(gem.significance([rec(area=area, c=(4.0, 9.0))]), [1.0])


def test_significance_two_face_hand_case():
    faces = [rec(area=100, c=(0, 0)), rec(area=200, c=(3, 4))]
    np.testing.assert_allclose(gem.significance(faces), [20.0, 40.0], rtol=0, atol=1e-12)


def test_significance_three_collinear():
    faces = [rec(area=6, c=(x, 0)) for x in (0, 1, 2)]
    s = gem.significance(faces)
    np.testing.assert_allclose(s, [2.0, 3.0, 2.0], rtol=0, atol=1e-12)
    assert np.argmax(s) == 1


def test_significance_coincident_centroids_rejected():
    with pytest.raises(DegenerateGeometryError, match="coincide"):
        gem.significance([rec(c=(1, 1)), rec(c=(1, 1)), rec(c=(1, 1))])


def test_face_record_requires_positive_area():
    with pytest.raises(ValueError):
        FaceRecord(1.0, None, 0.0, (0, 0))


def test_rigid_motion_invariance():
    rng = np.random.default_rng(5)
    c = rng.uniform(0, 100, (5, 2))
    areas = rng.uniform(10, 50, 5)
    t = np.pi / 5
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    moved = c @ R.T + np.array([13.0, -7.0])
    s1 = gem.significance([rec(area=a, c=tuple(p)) for a, p in zip(areas, c)])
    s2 = gem.significance([rec(area=a, c=tuple(p)) for a, p in zip(areas, moved)])
    np.testing.assert_allclose(s1, s2, rtol=1e-12)


# ---------------------------------------------------------------- weighted GEMs

def test_weighted_estimation_examples():
    faces = [rec(2, area=100, c=(0, 0)), rec(5, area=200, c=(3, 4))]
    assert gem.weighted_mean_estimation(faces) == pytest.approx(4.0, abs=1e-12)
    assert gem.weighted_mean_estimation([rec(3.3, area=9, c=(5, 5))]) == 3.3
    # equal significance: a square of equal faces
    sq = [rec(f, area=4, c=c) for f, c in zip((1, 2, 4, 5), ((0, 0), (1, 0), (0, 1), (1, 1)))]
    assert gem.weighted_mean_estimation(sq) == pytest.approx(gem.mean_estimation(sq), abs=1e-12)


def test_weighted_encoding_examples():
    # s = (1, 3) from equal distances and areas 1 and 3
    faces = [rec(x=[0.0], area=1, c=(0, 0)), rec(x=[4.0], area=3, c=(0, 2))]
    np.testing.assert_allclose(gem.significance(faces), [0.5, 1.5])
    np.testing.assert_allclose(gem.weighted_mean_encoding(faces), [3.0], atol=1e-12)
    one = [rec(x=[1.0, -2.0], area=5, c=(1, 1))]
    np.testing.assert_array_equal(gem.weighted_mean_encoding(one), [1.0, -2.0])
    sq = [rec(x=np.eye(3)[k % 3] * k, area=4, c=c) for k, c in enumerate(((0, 0), (1, 0), (0, 1), (1, 1)))]
    np.testing.assert_allclose(gem.weighted_mean_encoding(sq), gem.mean_encoding(sq), atol=1e-12)


def test_theta_rescaling_invariance():
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = int(rng.integers(2, 7))
        c = rng.uniform(0, 300, (n, 2))
        areas = rng.uniform(50, 2000, n)
        f = rng.uniform(0, 5, n)
        X = rng.standard_normal((n, 16))
        base = [rec(f[i], X[i], areas[i], tuple(c[i])) for i in range(n)]
        for k in (2.0, 0.37, 1e3):
            scaled = [rec(f[i], X[i], areas[i] * k, tuple(c[i])) for i in range(n)]
            np.testing.assert_allclose(gem.significance(scaled), k * gem.significance(base), rtol=1e-12)
            assert abs(gem.weighted_mean_estimation(scaled) - gem.weighted_mean_estimation(base)) <= 1e-12
            np.testing.assert_allclose(gem.weighted_mean_encoding(scaled), gem.weighted_mean_encoding(base),
                                       atol=1e-12, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(1, 500), st.floats(-100, 100), st.floats(-100, 100)),
                min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_estimation_gems_convex_and_permutation_invariant(items, rnd):
    faces = [rec(f, [f, -f], a, (x, y)) for f, a, x, y in items]
    if len(faces) > 1 and len({(x, y) for *_, x, y in items}) == 1:
        with pytest.raises(DegenerateGeometryError):
            gem.significance(faces)
        return
    shuffled = faces[:]
    rnd.shuffle(shuffled)
    fs = [f for f, *_ in items]
    for name in gem.GEMS:
        a = np.atleast_1d(gem.group_representation(name, faces))
        b = np.atleast_1d(gem.group_representation(name, shuffled))
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
        lo, hi = min(fs) - 1e-9, max(fs) + 1e-9
        assert np.all((a[0] >= lo) & (a[0] <= hi))
    assert np.all(gem.significance(faces) > 0)


def test_group_representation_dispatch():
    faces = [rec(1, [1.0], 1, (0, 0)), rec(3, [3.0], 1, (1, 0))]
    assert gem.group_representation("mean_estimation", faces) == 2.0
    np.testing.assert_array_equal(gem.group_representation("mean_encoding", faces), [2.0])
    with pytest.raises(ValueError, match="unknown GEM"):
        gem.group_representation("median", faces)
    assert set(gem.GEMS) == {"mean_estimation", "mean_encoding", "weighted_mean_estimation",
                             "weighted_mean_encoding"}
