"""Factorized feature grids (vector-matrix and tri-plane) and their sampling.

Grid nodes sit at the corners of the normalized cube: node ``i`` of an axis
with ``n`` nodes is located at ``-1 + 2 i / (n - 1)``. Points outside the cube
are clamped onto it before interpolation.

Every factor array is stored rank-major, i.e. ``(R, n)`` for a vector and
``(R, n_u, n_v)`` for a matrix/plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import gather_flat, scatter_flat

MAX_DENSE_ELEMENTS = 1 << 24

# VM terms: (vector axis, (matrix axes)). Plane order is yz, xz, xy.
VM_TERMS = ((0, (1, 2)), (1, (0, 2)), (2, (0, 1)))
PLANE_AXES = ((1, 2), (0, 2), (0, 1))

VM_FACTOR_NAMES = ("vec_x", "vec_y", "vec_z", "mat_yz", "mat_xz", "mat_xy")
PLANE_FACTOR_NAMES = ("plane_yz", "plane_xz", "plane_xy")


class BudgetError(ValueError):
    """Raised when a dense reconstruction would exceed the element budget."""


def _check_factor(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class FactorGridVM:
    """Vector-matrix factorization: sum over rank of vector (x) matrix terms.

    ``vectors[a]`` runs along axis ``a``; ``matrices[a]`` spans the two other
    axes in ascending order (yz, xz, xy).
    """

    vectors: tuple[np.ndarray, np.ndarray, np.ndarray]
    matrices: tuple[np.ndarray, np.ndarray, np.ndarray]

    family = "vm"
    factor_names = VM_FACTOR_NAMES

    def __post_init__(self):
        self.vectors = tuple(np.asarray(v) for v in self.vectors)
        self.matrices = tuple(np.asarray(m) for m in self.matrices)
        if len(self.vectors) != 3 or len(self.matrices) != 3:
            raise ValueError("VM grid needs three vectors and three matrices")
        rank = self.vectors[0].shape[0]
        res = tuple(v.shape[1] for v in self.vectors)
        for a, (vaxis, (b, c)) in enumerate(VM_TERMS):
            v, m = self.vectors[a], self.matrices[a]
            if v.ndim != 2 or m.ndim != 3:
                raise ValueError("vectors must be (R, n) and matrices (R, n_u, n_v)")
            if v.shape[0] != rank or m.shape[0] != rank:
                raise ValueError("all factors must share the same rank")
            if m.shape[1:] != (res[b], res[c]):
                raise ValueError(
                    f"matrix {VM_FACTOR_NAMES[3 + a]} has shape {m.shape[1:]}, "
                    f"expected {(res[b], res[c])}"
                )
        if min(res) < 2:
            raise ValueError("every resolution component must be >= 2")
        for name, arr in zip(self.factor_names, self.factors):
            _check_factor(arr, name)

    @property
    def rank(self) -> int:
        return self.vectors[0].shape[0]

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(v.shape[1]) for v in self.vectors)

    @property
    def factors(self) -> tuple[np.ndarray, ...]:
        return self.vectors + self.matrices

    @classmethod
    def from_factors(cls, factors: Sequence[np.ndarray]) -> "FactorGridVM":
        return cls(tuple(factors[:3]), tuple(factors[3:]))

    @classmethod
    def random(cls, resolution, rank, rng, scale=0.1, dtype=np.float64):
        res = tuple(int(r) for r in resolution)
        vecs = tuple(scale * rng.standard_normal((rank, res[a])) for a in range(3))
        mats = tuple(
            scale * rng.standard_normal((rank, res[b], res[c])) for _, (b, c) in VM_TERMS
        )
        return cls(tuple(v.astype(dtype) for v in vecs), tuple(m.astype(dtype) for m in mats))


@dataclass
class PlaneGrid:
    """Tri-plane factorization: broadcast product of three axis-aligned planes."""

    planes: tuple[np.ndarray, np.ndarray, np.ndarray]

    family = "planes"
    factor_names = PLANE_FACTOR_NAMES

    def __post_init__(self):
        self.planes = tuple(np.asarray(p) for p in self.planes)
        if len(self.planes) != 3:
            raise ValueError("plane grid needs exactly three planes")
        yz, xz, xy = self.planes
        if any(p.ndim != 3 for p in self.planes):
            raise ValueError("planes must be (R, n_u, n_v)")
        if not (yz.shape[0] == xz.shape[0] == xy.shape[0]):
            raise ValueError("all planes must share the same rank")
        dx, dy, dz = xy.shape[1], xy.shape[2], xz.shape[2]
        if yz.shape[1:] != (dy, dz) or xz.shape[1:] != (dx, dz):
            raise ValueError("plane shapes are inconsistent with a single resolution")
        if min(dx, dy, dz) < 2:
            raise ValueError("every resolution component must be >= 2")
        for name, arr in zip(self.factor_names, self.factors):
            _check_factor(arr, name)

    @property
    def rank(self) -> int:
        return self.planes[0].shape[0]

    @property
    def resolution(self) -> tuple[int, int, int]:
        xy, xz = self.planes[2], self.planes[1]
        return (int(xy.shape[1]), int(xy.shape[2]), int(xz.shape[2]))

    @property
    def factors(self) -> tuple[np.ndarray, ...]:
        return self.planes

    @classmethod
    def from_factors(cls, factors: Sequence[np.ndarray]) -> "PlaneGrid":
        return cls(tuple(factors))

    @classmethod
    def random(cls, resolution, rank, rng, low=0.1, high=0.5, dtype=np.float64):
        res = tuple(int(r) for r in resolution)
        planes = tuple(
            rng.uniform(low, high, (rank, res[b], res[c])).astype(dtype) for b, c in PLANE_AXES
        )
        return cls(planes)


@dataclass
class DenseGrid3D:
    """Dense ``(H, W, L, R)`` tensor; test oracle and visualization target only."""

    data: np.ndarray

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def rank(self) -> int:
        return self.data.shape[3]


def _check_budget(resolution, rank, max_elements):
    n = int(np.prod(resolution)) * int(rank)
    if n > max_elements:
        raise BudgetError(f"dense grid of {n} elements exceeds the budget of {max_elements}")


def reconstruct_dense_vm(g: FactorGridVM, max_elements: int = MAX_DENSE_ELEMENTS) -> DenseGrid3D:
    """Expand a VM grid into per-rank dense components (not summed over rank)."""
    _check_budget(g.resolution, g.rank, max_elements)
    vx, vy, vz = g.vectors
    myz, mxz, mxy = g.matrices
    data = (
        np.einsum("rh,rwl->hwlr", vx, myz)
        + np.einsum("rw,rhl->hwlr", vy, mxz)
        + np.einsum("rl,rhw->hwlr", vz, mxy)
    )
    return DenseGrid3D(data)


def reconstruct_dense_planes(g: PlaneGrid, max_elements: int = MAX_DENSE_ELEMENTS) -> DenseGrid3D:
    _check_budget(g.resolution, g.rank, max_elements)
    yz, xz, xy = g.planes
    data = np.einsum("ryz,rxz,rxy->xyzr", yz, xz, xy)
    return DenseGrid3D(data)


def reconstruct_dense(g, max_elements: int = MAX_DENSE_ELEMENTS) -> DenseGrid3D:
    if isinstance(g, FactorGridVM):
        return reconstruct_dense_vm(g, max_elements)
    return reconstruct_dense_planes(g, max_elements)


# --------------------------------------------------------------------------
# interpolation plans


def _axis_cell(coord: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.clip(coord, -1.0, 1.0) + 1.0) * (0.5 * (n - 1))
    i0 = np.minimum(np.floor(u).astype(np.intp), n - 2)
    return i0, u - i0


@dataclass
class LinePlan:
    idx: np.ndarray  # (2, N)
    w: np.ndarray  # (2, N)
    n: int

    @classmethod
    def build(cls, coord, n):
        i0, f = _axis_cell(coord, n)
        return cls(np.stack([i0, i0 + 1]), np.stack([1.0 - f, f]), n)

    def take(self, sel):
        return LinePlan(self.idx[:, sel], self.w[:, sel], self.n)


@dataclass
class PlanePlan:
    idx: np.ndarray  # (4, N) flat indices into (n_u, n_v)
    w: np.ndarray  # (4, N)
    shape: tuple[int, int]

    @classmethod
    def build(cls, cu, cv, nu, nv):
        iu, fu = _axis_cell(cu, nu)
        iv, fv = _axis_cell(cv, nv)
        base = iu * nv + iv
        idx = np.stack([base, base + 1, base + nv, base + nv + 1])
        w = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv])
        return cls(idx, w, (nu, nv))

    def take(self, sel):
        return PlanePlan(self.idx[:, sel], self.w[:, sel], self.shape)


def gather(arr: np.ndarray, plan) -> np.ndarray:
    """Interpolate a rank-major factor at the planned points -> ``(R, N)``."""
    return gather_flat(arr.reshape(arr.shape[0], -1), plan.idx, plan.w)


def scatter(grad: np.ndarray, plan, shape) -> np.ndarray:
    """Adjoint of :func:`gather`: accumulate ``(R, N)`` values onto the factor."""
    size = int(np.prod(shape[1:]))
    return scatter_flat(grad, plan.idx, plan.w, size).reshape(shape)


@dataclass
class GridPlan:
    """Interpolation plans for every factor of a grid at a set of points."""

    lines: tuple[LinePlan, ...]
    planes: tuple[PlanePlan, ...]
    size: int

    @classmethod
    def build(cls, points: np.ndarray, resolution) -> "GridPlan":
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lines = tuple(LinePlan.build(p[:, a], resolution[a]) for a in range(3))
        planes = tuple(
            PlanePlan.build(p[:, b], p[:, c], resolution[b], resolution[c]) for b, c in PLANE_AXES
        )
        return cls(lines, planes, p.shape[0])

    def take(self, sel) -> "GridPlan":
        return GridPlan(
            tuple(lp.take(sel) for lp in self.lines),
            tuple(pp.take(sel) for pp in self.planes),
            len(sel),
        )


def vm_components(g: FactorGridVM, plan: GridPlan):
    """Per-term, per-rank VM features ``(3, R, N)`` and their pullback.

    The pullback maps a cotangent of shape ``(3, R, N)`` to gradients of the
    six factors in :attr:`FactorGridVM.factors` order.
    """
    lines = [gather(g.vectors[a], plan.lines[a]) for a in range(3)]
    mats = [gather(g.matrices[a], plan.planes[a]) for a in range(3)]
    comps = np.stack([lines[a] * mats[a] for a in range(3)])

    def pullback(cot):
        dv = [scatter(cot[a] * mats[a], plan.lines[a], g.vectors[a].shape) for a in range(3)]
        dm = [scatter(cot[a] * lines[a], plan.planes[a], g.matrices[a].shape) for a in range(3)]
        return dv + dm

    return comps, pullback


def plane_components(g: PlaneGrid, plan: GridPlan):
    """Per-rank tri-plane features ``(R, N)`` and their pullback."""
    vals = [gather(g.planes[a], plan.planes[a]) for a in range(3)]
    prod = vals[0] * vals[1] * vals[2]

    def pullback(cot):
        others = (vals[1] * vals[2], vals[0] * vals[2], vals[0] * vals[1])
        return [scatter(cot * others[a], plan.planes[a], g.planes[a].shape) for a in range(3)]

    return prod, pullback


def components(g, plan: GridPlan) -> tuple[np.ndarray, Callable]:
    if isinstance(g, FactorGridVM):
        return vm_components(g, plan)
    return plane_components(g, plan)


def sample_vm(g: FactorGridVM, points) -> np.ndarray:
    """Sample a VM grid at normalized points in ``[-1, 1]^3``.

    Returns the unreduced per-term, per-rank products with shape ``(3, R)``
    for a single point or ``(3, R, N)`` for ``N`` points.
    """
    pts = np.asarray(points, dtype=np.float64)
    comps, _ = vm_components(g, GridPlan.build(pts, g.resolution))
    return comps[..., 0] if pts.ndim == 1 else comps


def sample_planes(g: PlaneGrid, points) -> np.ndarray:
    """Sample a plane grid; returns ``(R,)`` or ``(R, N)`` per-rank products."""
    pts = np.asarray(points, dtype=np.float64)
    comps, _ = plane_components(g, GridPlan.build(pts, g.resolution))
    return comps[..., 0] if pts.ndim == 1 else comps


def trilinear(dense: DenseGrid3D, points) -> np.ndarray:
    """Trilinear interpolation of a dense grid (corner-aligned, clamped).

    Returns ``(R,)`` for one point or ``(N, R)`` for ``N`` points.
    """
    pts = np.asarray(points, dtype=np.float64)
    p = pts.reshape(-1, 3)
    data = dense.data
    cells = [_axis_cell(p[:, a], data.shape[a]) for a in range(3)]
    out = np.zeros((p.shape[0], data.shape[3]))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = np.ones(p.shape[0])
                idx = []
                for a, d in enumerate((dx, dy, dz)):
                    i0, f = cells[a]
                    w = w * (f if d else 1.0 - f)
                    idx.append(i0 + d)
                out += w[:, None] * data[idx[0], idx[1], idx[2]]
    return out[0] if pts.ndim == 1 else out


# --------------------------------------------------------------------------
# resolution changes


def _resample_axis(arr: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    n_old = arr.shape[axis]
    if n_new == n_old:
        return arr.copy()
    coords = np.linspace(-1.0, 1.0, n_new)
    i0, f = _axis_cell(coords, n_old)
    # exact node hits where the new lattice coincides with the old one
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_new
    f = f.reshape(shape)
    return np.where(f == 0.0, a0, a0 * (1.0 - f) + a1 * f)


def upsample(g, new_resolution):
    """Linearly resample every factor onto a finer corner-aligned lattice."""
    new_res = tuple(int(r) for r in new_resolution)
    old_res = g.resolution
    if len(new_res) != 3 or any(n < o for n, o in zip(new_res, old_res)):
        raise ValueError(f"cannot shrink grid from {old_res} to {new_res}")
    if isinstance(g, FactorGridVM):
        vecs = tuple(_resample_axis(g.vectors[a], 1, new_res[a]) for a in range(3))
        mats = []
        for a, (_, (b, c)) in enumerate(VM_TERMS):
            m = _resample_axis(g.matrices[a], 1, new_res[b])
            mats.append(_resample_axis(m, 2, new_res[c]))
        return FactorGridVM(vecs, tuple(mats))
    planes = []
    for a, (b, c) in enumerate(PLANE_AXES):
        p = _resample_axis(g.planes[a], 1, new_res[b])
        planes.append(_resample_axis(p, 2, new_res[c]))
    return PlaneGrid(tuple(planes))
