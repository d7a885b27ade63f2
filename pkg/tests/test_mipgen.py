import numpy as np
import pytest
from hypothesis import given, strategies as st

from mipgrid.grids import DenseGrid3D, FactorGridVM, PlaneGrid, reconstruct_dense_vm
from mipgrid.mipgen import (
    MipKernelBank,
    dense_conv3d_oracle,
    depthwise_conv,
    gaussian_kernel_1d,
    generate,
    generate_planes,
    generate_vm,
    identity_bank,
    init_gaussian,
    kernel_second_moment,
    mean_second_moment,
    separable_kernel_3d,
)

STDEVS = (1.0, 1.5, 2.5, 4.0)


def conv1d_loop(x, k):
    """Sliding-window oracle with clamped (replicate) indexing."""
    n, p = len(x), len(k) // 2
    return np.array([sum(k[m] * x[min(max(j + m - p, 0), n - 1)] for m in range(len(k))) for j in range(n)])


def conv2d_loop(x, k):
    nu, nv = x.shape
    p = k.shape[0] // 2
    out = np.zeros_like(x)
    for i in range(nu):
        for j in range(nv):
            for a in range(k.shape[0]):
                for b in range(k.shape[1]):
                    out[i, j] += k[a, b] * x[min(max(i + a - p, 0), nu - 1), min(max(j + b - p, 0), nv - 1)]
    return out


def conv3d_loop(x, k):
    n = x.shape
    p = k.shape[0] // 2
    out = np.zeros_like(x)
    for idx in np.ndindex(*n):
        for off in np.ndindex(*k.shape):
            src = tuple(min(max(i + o - p, 0), m - 1) for i, o, m in zip(idx, off, n))
            out[idx] += k[off] * x[src]
    return out


# ------------------------------------------------------------------ kernels


def test_single_tap_kernel():
    for s in (0.3, 1.0, 7.0):
        np.testing.assert_array_equal(gaussian_kernel_1d(1, s), [1.0])


def test_gaussian_k3_sigma1():
    np.testing.assert_allclose(gaussian_kernel_1d(3, 1.0), [0.27406, 0.45186, 0.27406], atol=1e-5)  # reference values are truncated


def test_wide_gaussian_near_uniform():
    k = gaussian_kernel_1d(3, 4.0)
    assert k.max() - k.min() < 0.011


@pytest.mark.parametrize("bad", [(2, 1.0), (3, 0.0), (3, -1.0), (0, 1.0)])
def test_gaussian_rejects(bad):
    with pytest.raises(ValueError):
        gaussian_kernel_1d(*bad)


def test_init_rejects_wrong_stdev_count(rng):
    g = FactorGridVM.random((4, 4, 4), 2, rng)
    with pytest.raises(ValueError):
        init_gaussian(4, 3, (1.0, 2.0), g)


def test_bank_rejects_even_and_single_scale():
    with pytest.raises(ValueError):
        MipKernelBank((np.ones((2, 1, 4)),))
    with pytest.raises(ValueError):
        MipKernelBank((np.ones((1, 1, 3)),))
    with pytest.raises(ValueError):
        MipKernelBank((np.full((2, 1, 3), np.nan),))


def test_bank_shape_mismatch(rng):
    g = FactorGridVM.random((4, 4, 4), 2, rng)
    other = init_gaussian(2, 3, (1.0, 2.0), FactorGridVM.random((4, 4, 4), 3, rng))
    with pytest.raises(ValueError):
        generate_vm(g, other)


@pytest.mark.parametrize("family", ["vm", "planes"])
def test_init_sums_to_one_and_outer_product(rng, family):
    g = FactorGridVM.random((5, 5, 5), 2, rng) if family == "vm" else PlaneGrid.random((5, 5, 5), 2, rng)
    bank = init_gaussian(4, 3, STDEVS, g)
    for ker in bank.kernels:
        sums = ker.reshape(ker.shape[0], ker.shape[1], -1).sum(-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        if ker.ndim == 4:
            for i, s in enumerate(STDEVS):
                k1 = gaussian_kernel_1d(3, s)
                np.testing.assert_allclose(ker[i, 0], np.outer(k1, k1), rtol=1e-15)


# ------------------------------------------------------------------ generation


@pytest.mark.parametrize("family", ["vm", "planes"])
def test_identity_kernels_copy(rng, family):
    g = FactorGridVM.random((5, 6, 7), 3, rng) if family == "vm" else PlaneGrid.random((5, 6, 7), 3, rng)
    ms = generate(g, identity_bank(4, 3, g))[0]
    for i in range(4):
        for a, b in zip(ms[i].factors, g.factors):
            np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("family", ["vm", "planes"])
def test_constants_preserved(rng, family):
    g = FactorGridVM.random((5, 6, 7), 2, rng) if family == "vm" else PlaneGrid.random((5, 6, 7), 2, rng)
    g = type(g).from_factors([np.full_like(f, 0.37) for f in g.factors])
    # arbitrary sum-1 kernels, not necessarily symmetric or positive
    kernels = []
    for f in g.factors:
        k = rng.standard_normal((3, f.shape[0]) + (5,) * (f.ndim - 1))
        k /= k.reshape(3, f.shape[0], -1).sum(-1).reshape((3, f.shape[0]) + (1,) * (f.ndim - 1))
        kernels.append(k)
    ms = generate(g, MipKernelBank(tuple(kernels)))[0]
    for i in range(3):
        for a in ms[i].factors:
            np.testing.assert_allclose(a, 0.37, rtol=1e-12)


def test_vm_vector_matches_loop(rng):
    g = FactorGridVM.random((8, 5, 6), 2, rng, scale=1.0)
    bank = MipKernelBank(tuple(rng.standard_normal((2, 2) + (3,) * (f.ndim - 1)) for f in g.factors))
    ms = generate_vm(g, bank)
    for i in range(2):
        for fi, f in enumerate(g.factors):
            for r in range(2):
                k = bank.kernels[fi][i, r]
                ref = conv1d_loop(f[r], k) if f.ndim == 2 else conv2d_loop(f[r], k)
                np.testing.assert_allclose(ms[i].factors[fi][r], ref, rtol=1e-12, atol=1e-14)


def test_planes_match_loop(rng):
    g = PlaneGrid.random((4, 5, 6), 2, rng)
    bank = MipKernelBank(tuple(rng.standard_normal((2, 2, 5, 5)) for _ in range(3)))
    ms = generate_planes(g, bank)
    for i in range(2):
        for fi, f in enumerate(g.factors):
            for r in range(2):
                np.testing.assert_allclose(ms[i].factors[fi][r], conv2d_loop(f[r], bank.kernels[fi][i, r]), rtol=1e-12, atol=1e-14)


def test_family_guards(rng):
    g = FactorGridVM.random((4, 4, 4), 1, rng)
    with pytest.raises(TypeError):
        generate_planes(g, identity_bank(2, 3, g))


def test_depthwise_isolation(rng):
    g = FactorGridVM.random((6, 6, 6), 3, rng, scale=1.0)
    bank = init_gaussian(2, 3, (1.0, 2.0), g)
    base = generate_vm(g, bank)
    pert = bank.copy()
    pert.kernels[3][1, 1] += rng.standard_normal(pert.kernels[3][1, 1].shape)
    out = generate_vm(g, pert)
    for fi in range(6):
        for r in range(3):
            same = np.array_equal(out.stacked[fi][:, r], base.stacked[fi][:, r])
            assert same == (not (fi == 3 and r == 1))


@given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    g1 = FactorGridVM.random((4, 5, 3), 2, rng, scale=1.0)
    g2 = FactorGridVM.random((4, 5, 3), 2, rng, scale=1.0)
    bank = MipKernelBank(tuple(rng.standard_normal((2, 2) + (3,) * (f.ndim - 1)) for f in g1.factors))
    mix = FactorGridVM.from_factors([a * x + b * y for x, y in zip(g1.factors, g2.factors)])
    lhs = generate_vm(mix, bank)
    m1, m2 = generate_vm(g1, bank), generate_vm(g2, bank)
    for l, x, y in zip(lhs.stacked, m1.stacked, m2.stacked):
        np.testing.assert_allclose(l, a * x + b * y, atol=1e-12)


def test_conv_pullback_is_adjoint(rng):
    for shape, kshape in (((3, 7), (2, 3, 5)), ((3, 4, 6), (2, 3, 3, 3))):
        x = rng.standard_normal(shape)
        ker = rng.standard_normal(kshape)
        y, pb = depthwise_conv(x, ker)
        g = rng.standard_normal(y.shape)
        dx, dk = pb(g)
        dxv = rng.standard_normal(x.shape)
        # <g, J dx> == <J^T g, dx>: the map is linear in x for fixed kernels
        np.testing.assert_allclose(np.sum(g * depthwise_conv(dxv, ker)[0]), np.sum(dx * dxv), rtol=1e-12)
        dkv = rng.standard_normal(ker.shape)
        np.testing.assert_allclose(np.sum(g * depthwise_conv(x, dkv)[0]), np.sum(dk * dkv), rtol=1e-12)


# ------------------------------------------------------------------ dense oracle


def test_dense_oracle_identity(rng):
    d = DenseGrid3D(rng.standard_normal((5, 6, 4, 2)))
    e = np.array([0.0, 1.0, 0.0])
    out = dense_conv3d_oracle(d, e, np.outer(e, e))
    np.testing.assert_array_equal(out.data, d.data)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_dense_oracle_impulse(rng, axis):
    x = np.zeros((7, 7, 7, 1))
    x[3, 3, 3, 0] = 1.0
    k1, k2 = rng.standard_normal(3), rng.standard_normal((3, 3))
    out = dense_conv3d_oracle(DenseGrid3D(x), k1, k2, axis).data[..., 0]
    # cross-correlation flips the kernel in the impulse response
    ker = separable_kernel_3d(k1, k2, axis)[::-1, ::-1, ::-1]
    np.testing.assert_allclose(out[2:5, 2:5, 2:5], ker, rtol=1e-15)
    out[2:5, 2:5, 2:5] = 0
    assert not out.any()


def test_dense_oracle_loop(rng):
    x = rng.standard_normal((6, 6, 6, 1))
    k1, k2 = rng.standard_normal(3), rng.standard_normal((3, 3))
    out = dense_conv3d_oracle(DenseGrid3D(x), k1, k2, 1).data[..., 0]
    np.testing.assert_allclose(out, conv3d_loop(x[..., 0], separable_kernel_3d(k1, k2, 1)), rtol=1e-12, atol=1e-13)


def test_separability_single_term(rng):
    g = FactorGridVM.random((6, 7, 5), 1, rng, scale=1.0)
    bank = MipKernelBank(tuple(rng.standard_normal((2, 1) + (3,) * (f.ndim - 1)) for f in g.factors))
    ms = generate_vm(g, bank)
    for axis in range(3):
        # keep only the term whose vector runs along `axis`
        keep = [np.zeros_like(f) for f in g.factors]
        keep[axis], keep[axis + 3] = g.factors[axis], g.factors[axis + 3]
        term = FactorGridVM.from_factors(keep)
        conv = FactorGridVM.from_factors([f[0] for f in ms.stacked])
        conv = FactorGridVM.from_factors([c if i in (axis, axis + 3) else np.zeros_like(c) for i, c in enumerate(conv.factors)])
        lhs = reconstruct_dense_vm(conv).data
        rhs = dense_conv3d_oracle(reconstruct_dense_vm(term), bank.kernels[axis][0], bank.kernels[axis + 3][0], axis).data
        np.testing.assert_allclose(lhs[1:-1, 1:-1, 1:-1], rhs[1:-1, 1:-1, 1:-1], atol=1e-12)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ------------------------------------------------------------------ moments


def _bank_1d(k):
    return MipKernelBank((np.stack([k, k])[:, None, :],))


def test_moment_identity():
    assert kernel_second_moment(_bank_1d(np.array([0.0, 1.0, 0.0])), 0)[0][0] == 0.0


def test_moment_uniform():
    np.testing.assert_allclose(kernel_second_moment(_bank_1d(np.full(3, 1 / 3)), 1)[0][0], 2 / 3)


def test_moment_gaussian():
    np.testing.assert_allclose(kernel_second_moment(_bank_1d(gaussian_kernel_1d(3, 1.0)), 0)[0][0], 0.54813, atol=1e-5)


def test_moment_scale_invariant_for_unnormalized():
    k = gaussian_kernel_1d(3, 1.5)
    a = kernel_second_moment(_bank_1d(k), 0)[0][0]
    b = kernel_second_moment(_bank_1d(3.7 * k), 0)[0][0]
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_moment_near_zero_sum_flagged():
    with pytest.warns(UserWarning):
        m = kernel_second_moment(_bank_1d(np.array([1.0, -2.0, 1.0])), 0)
    assert np.isnan(m[0][0])


def test_moment_bad_scale():
    with pytest.raises(IndexError):
        kernel_second_moment(_bank_1d(np.ones(3)), 2)


@pytest.mark.parametrize("family", ["vm", "planes"])
def test_moments_increase_with_gaussian_init(rng, family):
    g = FactorGridVM.random((5, 5, 5), 2, rng) if family == "vm" else PlaneGrid.random((5, 5, 5), 2, rng)
    bank = init_gaussian(4, 3, STDEVS, g)
    m = [mean_second_moment(bank, i) for i in range(4)]
    assert all(b > a for a, b in zip(m, m[1:]))
    for i in range(4):
        for vals in kernel_second_moment(bank, i):
            assert vals.shape == (2,)


def test_identity_bank_moments_zero(rng):
    g = FactorGridVM.random((5, 5, 5), 2, rng)
    bank = identity_bank(3, 5, g)
    for i in range(3):
        for vals in kernel_second_moment(bank, i):
            np.testing.assert_array_equal(vals, 0.0)
