import numpy as np
import pytest

from mixupmil.rng import RngStream


def reference_uniforms(seed, n):
    raw = np.random.PCG64(seed).random_raw(n)
    return [(int(w) >> 11) / 2.0**53 for w in raw]


def test_same_seed_same_sequence():
    a, b = RngStream(99), RngStream(99)
    assert a.uniform(50).tobytes() == b.uniform(50).tobytes()
    assert a.normal((4, 3)).tobytes() == b.normal((4, 3)).tobytes()
    assert list(a.permutation(20)) == list(b.permutation(20))


def test_uniform_matches_documented_construction():
    assert RngStream(3).uniform(10).tolist() == reference_uniforms(3, 10)


def test_scalar_and_vector_draws_consume_the_same_words():
    a, b = RngStream(5), RngStream(5)
    scalars = [a.uniform() for _ in range(6)]
    assert scalars == b.uniform(6).tolist()


def test_uniform_range():
    u = RngStream(1).uniform(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_integers_range_and_array_bounds():
    s = RngStream(2)
    x = s.integers(7, size=10_000)
    assert x.min() == 0 and x.max() == 6
    bounds = np.array([1, 2, 3, 1000])
    y = s.integers(bounds)
    assert np.all((y >= 0) & (y < bounds))
    with pytest.raises(ValueError):
        s.integers(0)


def test_permutation_is_documented_fisher_yates():
    u = reference_uniforms(11, 9)
    perm = list(range(10))
    for k in range(9):
        i = 9 - k
        j = int(u[k] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    assert RngStream(11).permutation(10).tolist() == perm


def test_normal_moments():
    z = RngStream(4).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    assert isinstance(RngStream(4).normal(), float)


def test_seed_is_reduced_to_64_bits():
    assert RngStream(2**64 + 5).seed == 5
