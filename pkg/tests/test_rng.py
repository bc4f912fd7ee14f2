import numpy as np

from fcmh.rng import Xoshiro256, derive_seed


def test_deterministic_stream():
    a = Xoshiro256(42).next_u64(100)
    b = Xoshiro256(42).next_u64(100)
    np.testing.assert_array_equal(a, b)


def test_chunking_invariance():
    r1 = Xoshiro256(7)
    r2 = Xoshiro256(7)
    whole = r1.next_u64(1000)
    parts = np.concatenate([r2.next_u64(n) for n in (1, 10, 489, 500)])
    np.testing.assert_array_equal(whole, parts)


def test_uniform_bounds_and_moments():
    u = Xoshiro256(3).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 2e-3


def test_normal_moments():
    z = Xoshiro256(4).normal(200_000)
    assert abs(z.mean()) < 8e-3
    assert abs(z.std() - 1.0) < 8e-3


def test_integers_in_range():
    k = Xoshiro256(5).integers(3, 30_000)
    assert k.min() == 0 and k.max() == 2
    counts = np.bincount(k, minlength=3) / 30_000
    assert np.all(np.abs(counts - 1 / 3) < 0.02)


def test_derive_seed_distinct():
    seeds = {derive_seed(1, t) for t in ("weights", "noise", "data", 0, 1, 2)}
    assert len(seeds) == 6


def test_shuffle_is_permutation():
    p = Xoshiro256(6).shuffle(100)
    assert sorted(p.tolist()) == list(range(100))
