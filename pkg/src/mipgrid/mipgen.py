"""Multi-scale grid generation by depth-wise convolution of a shared grid.

Each scale ``i`` owns one kernel per factor and per rank: a ``K``-tap kernel
for every vector and a ``K x K`` kernel for every matrix/plane. Convolution is
cross-correlation (``out[j] = sum_m k[m] x[j + m - K//2]``) with replicate
padding, so a kernel that sums to one leaves constant factors untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grids import MAX_DENSE_ELEMENTS, BudgetError, DenseGrid3D, FactorGridVM, PlaneGrid


@dataclass
class MipKernelBank:
    """Per-scale, per-factor, per-rank depth-wise kernels.

    ``kernels[f]`` has shape ``(S, R, K)`` when factor ``f`` of the owning grid
    is a vector and ``(S, R, K, K)`` when it is a matrix or plane.
    """

    kernels: tuple[np.ndarray, ...]
    trainable: bool = True

    def __post_init__(self):
        self.kernels = tuple(np.asarray(k) for k in self.kernels)
        if not self.kernels:
            raise ValueError("kernel bank is empty")
        s, _, k = self.kernels[0].shape[:3]
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if s < 2:
            raise ValueError(f"a kernel bank needs at least two scales, got {s}")
        for ker in self.kernels:
            if ker.shape[0] != s or any(d != k for d in ker.shape[2:]):
                raise ValueError("kernels disagree on scale count or kernel size")
            if not np.all(np.isfinite(ker)):
                raise ValueError("kernel weights must be finite")

    @property
    def scales(self) -> int:
        return self.kernels[0].shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels[0].shape[2]

    def check_matches(self, grid) -> None:
        if len(self.kernels) != len(grid.factors):
            raise ValueError(
                f"bank has {len(self.kernels)} kernel sets, grid has {len(grid.factors)} factors"
            )
        for ker, fac, name in zip(self.kernels, grid.factors, grid.factor_names):
            if ker.shape[1] != fac.shape[0] or ker.ndim - 2 != fac.ndim - 1:
                raise ValueError(f"kernel set for {name} has shape {ker.shape}, factor {fac.shape}")

    def copy(self) -> "MipKernelBank":
        return MipKernelBank(tuple(k.copy() for k in self.kernels), self.trainable)


@dataclass
class MultiScaleGrid:
    """``S`` generated grids stacked along a leading scale axis per factor."""

    family: type
    stacked: tuple[np.ndarray, ...]

    @property
    def scales(self) -> int:
        return self.stacked[0].shape[0]

    def scale(self, i: int):
        return self.family.from_factors([f[i] for f in self.stacked])

    def __len__(self):
        return self.scales

    def __getitem__(self, i):
        return self.scale(i)


def gaussian_kernel_1d(kernel_size: int, stdev: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
    if not stdev > 0:
        raise ValueError(f"standard deviation must be positive, got {stdev}")
    j = np.arange(kernel_size) - (kernel_size - 1) / 2
    w = np.exp(-(j**2) / (2.0 * stdev**2))
    return w / w.sum()


def init_gaussian(scales: int, kernel_size: int, stdevs, grid) -> MipKernelBank:
    """Gaussian-initialized bank shaped for ``grid``.

    ``stdevs[0]`` sets the highest (full-resolution) scale and ``stdevs[-1]``
    the lowest. Matrix kernels are outer products of the 1-D kernel.
    """
    stdevs = [float(s) for s in stdevs]
    if len(stdevs) != scales:
        raise ValueError(f"expected {scales} standard deviations, got {len(stdevs)}")
    k1 = np.stack([gaussian_kernel_1d(kernel_size, s) for s in stdevs])  # (S, K)
    k2 = np.einsum("sa,sb->sab", k1, k1)
    kernels = []
    for fac in grid.factors:
        rank = fac.shape[0]
        base = k1 if fac.ndim == 2 else k2
        kernels.append(np.repeat(base[:, None], rank, axis=1).astype(fac.dtype))
    return MipKernelBank(tuple(kernels))


def identity_bank(scales: int, kernel_size: int, grid) -> MipKernelBank:
    c = kernel_size // 2
    kernels = []
    for fac in grid.factors:
        shape = (scales, fac.shape[0]) + (kernel_size,) * (fac.ndim - 1)
        k = np.zeros(shape, dtype=fac.dtype)
        k[(Ellipsis,) + (c,) * (fac.ndim - 1)] = 1.0
        kernels.append(k)
    return MipKernelBank(tuple(kernels))


# --------------------------------------------------------------------------
# depth-wise convolution with replicate padding


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    spatial = x.ndim - 1
    xp = np.pad(x, [(0, 0)] + [(p, p)] * spatial, mode="edge")
    return sliding_window_view(xp, (k,) * spatial, axis=tuple(range(1, x.ndim)))


def _fold_padding(gp: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Adjoint of replicate padding along one axis."""
    if p == 0:
        return gp
    n = gp.shape[axis] - 2 * p
    core = np.take(gp, np.arange(p, p + n), axis=axis)
    lo = np.take(gp, np.arange(0, p), axis=axis).sum(axis=axis)
    hi = np.take(gp, np.arange(p + n, n + 2 * p), axis=axis).sum(axis=axis)
    idx_lo = [slice(None)] * gp.ndim
    idx_lo[axis] = 0
    idx_hi = [slice(None)] * gp.ndim
    idx_hi[axis] = n - 1
    core[tuple(idx_lo)] += lo
    core[tuple(idx_hi)] += hi
    return core


def depthwise_conv(x: np.ndarray, kernels: np.ndarray):
    """Convolve a rank-major factor with per-scale, per-rank kernels.

    ``x`` is ``(R, n)`` or ``(R, n_u, n_v)``; ``kernels`` is ``(S, R, K[, K])``.
    Returns ``(S, R, ...)`` and a pullback giving ``(dx, dkernels)``.
    """
    k = kernels.shape[2]
    win = _windows(x, k)
    if x.ndim == 2:
        out = np.einsum("rjm,srm->srj", win, kernels)
    else:
        out = np.einsum("rijab,srab->srij", win, kernels)

    def pullback(g):
        p = k // 2
        if x.ndim == 2:
            dker = np.einsum("srj,rjm->srm", g, win)
            dwin = np.einsum("srj,srm->rjm", g, kernels)
            n = x.shape[1]
            dxp = np.zeros((x.shape[0], n + 2 * p), dtype=g.dtype)
            for m in range(k):
                dxp[:, m : m + n] += dwin[:, :, m]
            dx = _fold_padding(dxp, p, 1)
        else:
            dker = np.einsum("srij,rijab->srab", g, win)
            dwin = np.einsum("srij,srab->rijab", g, kernels)
            nu, nv = x.shape[1:]
            dxp = np.zeros((x.shape[0], nu + 2 * p, nv + 2 * p), dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    dxp[:, a : a + nu, b : b + nv] += dwin[..., a, b]
            dx = _fold_padding(_fold_padding(dxp, p, 1), p, 2)
        return dx, dker

    return out, pullback


def generate(shared, bank: MipKernelBank):
    """Generate all ``S`` scales from a shared grid.

    Returns a :class:`MultiScaleGrid` and a pullback mapping stacked factor
    cotangents (each ``(S, ...)``) to ``(shared factor grads, kernel grads)``.
    """
    bank.check_matches(shared)
    results = [depthwise_conv(fac, ker) for fac, ker in zip(shared.factors, bank.kernels)]
    ms = MultiScaleGrid(type(shared), tuple(out for out, _ in results))

    def pullback(cots):
        pairs = [pb(c) for (_, pb), c in zip(results, cots)]
        return [dx for dx, _ in pairs], [dk for _, dk in pairs]

    return ms, pullback


def generate_vm(shared: FactorGridVM, bank: MipKernelBank) -> MultiScaleGrid:
    if not isinstance(shared, FactorGridVM):
        raise TypeError("generate_vm expects a FactorGridVM")
    return generate(shared, bank)[0]


def generate_planes(shared: PlaneGrid, bank: MipKernelBank) -> MultiScaleGrid:
    if not isinstance(shared, PlaneGrid):
        raise TypeError("generate_planes expects a PlaneGrid")
    return generate(shared, bank)[0]


def separable_kernel_3d(k1: np.ndarray, k2: np.ndarray, vector_axis: int) -> np.ndarray:
    """Outer-product 3-D kernel: ``k1`` along ``vector_axis``, ``k2`` on the rest."""
    k = np.einsum("a,bc->abc", k1, k2)
    return np.moveaxis(k, 0, vector_axis)


def dense_conv3d_oracle(
    dense: DenseGrid3D,
    k1: np.ndarray,
    k2: np.ndarray,
    vector_axis: int = 0,
    max_elements: int = MAX_DENSE_ELEMENTS,
) -> DenseGrid3D:
    """3-D replicate-padded convolution with a separable outer-product kernel.

    ``k1`` is ``(K,)`` or per-rank ``(R, K)``; ``k2`` is ``(K, K)`` or
    ``(R, K, K)``. Applied independently to every rank channel.
    """
    data = dense.data
    if data.size > max_elements:
        raise BudgetError(f"dense grid of {data.size} elements exceeds the budget")
    rank = data.shape[3]
    k1 = np.broadcast_to(np.asarray(k1), (rank,) + np.shape(k1)[-1:])
    k2 = np.broadcast_to(np.asarray(k2), (rank,) + np.shape(k2)[-2:])
    k = k1.shape[-1]
    x = np.moveaxis(data, 3, 0)  # (R, H, W, L)
    win = _windows(x, k)  # (R, H, W, L, K, K, K)
    ker = np.stack([separable_kernel_3d(k1[r], k2[r], vector_axis) for r in range(rank)])
    out = np.einsum("rhwlabc,rabc->hwlr", win, ker)
    return DenseGrid3D(out)


def kernel_second_moment(bank: MipKernelBank, scale: int) -> list[np.ndarray]:
    """Normalized second moment of each kernel at one scale.

    1-D kernels give ``sum w (j - c)^2 / sum w``; 2-D kernels give the radial
    analogue ``sum w ((a - c)^2 + (b - c)^2) / sum w``. Kernels whose weights
    sum to ``<= 1e-8`` yield NaN and a warning.
    Returns one ``(R,)`` array per factor.
    """
    if not 0 <= scale < bank.scales:
        raise IndexError(f"scale {scale} out of range for {bank.scales} scales")
    k = bank.kernel_size
    d2 = (np.arange(k) - (k - 1) / 2) ** 2
    out = []
    flagged = 0
    for ker in bank.kernels:
        w = ker[scale]
        if w.ndim == 2:
            num = w @ d2
            den = w.sum(axis=1)
        else:
            radial = d2[:, None] + d2[None, :]
            num = np.einsum("rab,ab->r", w, radial)
            den = w.sum(axis=(1, 2))
        bad = den <= 1e-8
        flagged += int(bad.sum())
        out.append(np.where(bad, np.nan, num / np.where(bad, 1.0, den)))
    if flagged:
        warnings.warn(f"{flagged} kernel(s) at scale {scale} have near-zero weight sum", stacklevel=2)
    return out


def mean_second_moment(bank: MipKernelBank, scale: int) -> float:
    return float(np.mean(np.concatenate(kernel_second_moment(bank, scale))))
