import numpy as np

from stageflow.rng import Rng, fnv1a64, stream


def test_same_seed_same_stream():
    a = [Rng(42).u64() for _ in range(5)]
    b = [Rng(42).u64() for _ in range(5)]
    assert a == b


def test_zero_seed_is_valid():
    r = Rng(0)
    vals = {r.u64() for _ in range(100)}
    assert len(vals) == 100


def test_uniform_range_and_determinism():
    r = Rng(7)
    xs = r.uniforms(1000)
    assert np.all((xs >= 0.0) & (xs < 1.0))
    assert not np.allclose(xs[:500], xs[500:])


def test_randint_bounds():
    r = Rng(3)
    draws = [r.randint(7) for _ in range(500)]
    assert set(draws) <= set(range(7))
    assert len(set(draws)) == 7


def test_normals_rough_moments():
    xs = Rng(11).normals(20_000)
    assert abs(float(xs.mean())) < 0.03
    assert abs(float(xs.std()) - 1.0) < 0.03


def test_normals_shape():
    assert Rng(1).normals((3, 4, 2)).shape == (3, 4, 2)


def test_streams_are_label_independent():
    a = stream(5, "alpha")
    b = stream(5, "beta")
    assert [a.u64() for _ in range(4)] != [b.u64() for _ in range(4)]
    # and reproducible
    assert stream(5, "alpha").u64() == stream(5, "alpha").u64()


def test_stream_index_variants_differ():
    assert stream(5, "x", 0).u64() != stream(5, "x", 1).u64()


def test_fnv_is_stable():
    # frozen value, recomputed by hand from the FNV-1a 64-bit definition
    assert fnv1a64("stageflow") == 0x4EE03903513CBA5D
    assert fnv1a64("a") != fnv1a64("b")
