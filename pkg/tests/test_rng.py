import numpy as np
import pytest

from mvgmn.rng import Xoshiro256pp, derive_seed, splitmix64


def test_splitmix64_reference_vector():
    # First output for seed 0, from the reference implementation.
    assert next(splitmix64(0)) == 0xE220A8397B1DCDAF


def test_xoshiro_reference_outputs_from_raw_state():
    rng = Xoshiro256pp(0)
    rng._s = [1, 2, 3, 4]
    # First two outputs of xoshiro256++ for state (1,2,3,4), derived by hand
    # from the update rule.
    assert rng.u64() == 41943041
    assert rng.u64() == 58720359


def test_same_seed_same_stream():
    a = Xoshiro256pp(12345)
    b = Xoshiro256pp(12345)
    assert a.u64s(100) == b.u64s(100)
    assert np.array_equal(a.normals(51), b.normals(51))


def test_different_seeds_differ():
    assert Xoshiro256pp(1).u64s(8) != Xoshiro256pp(2).u64s(8)


def test_uniform_range_and_moments():
    u = Xoshiro256pp(7).uniforms(20000)
    assert np.all(u >= 0.0) and np.all(u < 1.0)
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(u.var() - 1.0 / 12.0) < 0.005


def test_normals_moments():
    z = Xoshiro256pp(11).normals(20000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_below_bounds_and_rejects_bad_bound():
    rng = Xoshiro256pp(3)
    draws = [rng.below(13) for _ in range(2000)]
    assert min(draws) == 0 and max(draws) == 12
    with pytest.raises(ValueError):
        rng.below(0)


def test_shuffle_is_permutation_and_deterministic():
    a = list(range(50))
    b = list(range(50))
    Xoshiro256pp(9).shuffle(a)
    Xoshiro256pp(9).shuffle(b)
    assert a == b
    assert sorted(a) == list(range(50))
    assert a != list(range(50))


def test_orthogonal_is_orthogonal():
    q = Xoshiro256pp(5).orthogonal(8)
    np.testing.assert_allclose(q.T @ q, np.eye(8), atol=1e-12)


def test_derive_seed_varies_by_tag():
    s = {derive_seed(42, t) for t in range(32)}
    assert len(s) == 32
    assert derive_seed(42, 3, 1) != derive_seed(42, 1, 3)
    assert derive_seed(42, 5) == derive_seed(42, 5)
