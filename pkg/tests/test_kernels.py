import numpy as np
from hypothesis import given, strategies as st

from mipgrid._kernels import SNAP, gather_flat, gather_numpy, scale_slots, scatter_flat, scatter_numpy


def stencil(rng, rank, size, k, n):
    flat = rng.standard_normal((rank, size))
    idx = rng.integers(0, size, (k, n)).astype(np.intp)
    w = rng.random((k, n))
    return flat, idx, w


@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 30), st.sampled_from([2, 4, 8]), st.integers(1, 50))
def test_compiled_gather_scatter_match_numpy(seed, rank, size, k, n):
    rng = np.random.default_rng(seed)
    flat, idx, w = stencil(rng, rank, size, k, n)
    np.testing.assert_allclose(gather_flat(flat, idx, w), gather_numpy(flat, idx, w), rtol=1e-13, atol=1e-14)
    g = rng.standard_normal((rank, n))
    np.testing.assert_allclose(scatter_flat(g, idx, w, size), scatter_numpy(g, idx, w, size), rtol=1e-12, atol=1e-13)


def test_scatter_is_adjoint_of_gather(rng):
    flat, idx, w = stencil(rng, 3, 20, 4, 40)
    g = rng.standard_normal((3, 40))
    lhs = np.sum(gather_flat(flat, idx, w) * g)
    rhs = np.sum(flat * scatter_flat(g, idx, w, 20))
    assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_scale_slots_integral_uses_one_slot():
    sidx, sw = scale_slots(np.array([0.0, 1.0, 3.0, 2.0 + SNAP / 2]), 4, 4)
    assert sidx.shape == (1, 4)
    np.testing.assert_array_equal(sidx[0], [0, 1, 3, 2])
    np.testing.assert_array_equal(sw, 1.0)


def test_scale_slots_fractional_uses_two():
    sidx, sw = scale_slots(np.array([0.25, 2.0, 2.5, 7.0, -1.0]), 4, 5)
    np.testing.assert_array_equal(sidx, [[0, 2, 2, 3, 0], [1, 3, 3, 3, 1]])
    np.testing.assert_allclose(sw, [[0.75, 1, 0.5, 1, 1], [0.25, 0, 0.5, 0, 0]])
    np.testing.assert_allclose(sw.sum(0), 1.0)


def test_scale_slots_scalar_and_none():
    sidx, sw = scale_slots(1.5, 4, 3)
    assert sidx.shape == (2, 3) and np.all(sw == 0.5)
    sidx, sw = scale_slots(None, 4, 3)
    np.testing.assert_array_equal(sidx, 0)
    np.testing.assert_array_equal(sw, 1.0)
