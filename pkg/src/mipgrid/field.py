"""Radiance field on top of multi-scale factor grids.

Density is ``softplus(sum of density components + shift)``; colour comes from
an appearance feature basis followed by a two-layer MLP that also sees a
frequency encoding of the view direction. Features for a fractional scale
index are blended from the two neighbouring generated scales.

Every ``*_vjp`` style call returns its output together with a pullback that
maps output cotangents to parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from ._kernels import planes_multiscale, scale_slots, vm_multiscale
from .grids import FactorGridVM, GridPlan, PlaneGrid, components, upsample
from .mipgen import MipKernelBank, MultiScaleGrid, generate, init_gaussian
from .scalecoord import ScaleCoordinate, ScaleIndexMap, blend_weights

DIR_OCTAVES = 2
DIR_ENC_DIM = 3 + 6 * DIR_OCTAVES


@dataclass
class FieldConfig:
    family: str = "vm"
    resolution: tuple = (32, 32, 32)
    density_rank: int = 8
    appearance_rank: int = 16
    appearance_channels: int = 12
    hidden: int = 64
    scales: int = 4
    kernel_size: int = 3
    stdevs: tuple = (1.0, 1.5, 2.5, 4.0)
    scale_kind: str = "disc"
    density_shift: float = -10.0
    bound: float = 1.0

    def __post_init__(self):
        if self.family not in ("vm", "planes"):
            raise ValueError(f"unknown grid family {self.family!r}")
        if self.scale_kind not in ("disc", "cont", "2d"):
            raise ValueError(f"unknown scale coordinate kind {self.scale_kind!r}")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.scales > 1 and len(self.stdevs) != self.scales:
            raise ValueError(f"{len(self.stdevs)} stdevs given for {self.scales} scales")
        self.resolution = tuple(int(r) for r in self.resolution)
        self.stdevs = tuple(float(s) for s in self.stdevs)

    @property
    def bank_count(self) -> int:
        if self.scales == 1:
            return 0
        return 2 if self.scale_kind == "2d" else 1


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def encode_direction(d: np.ndarray) -> np.ndarray:
    """``[d, sin(2^k d), cos(2^k d)]`` for ``k < DIR_OCTAVES`` -> ``(N, 15)``."""
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    parts = [d]
    for k in range(DIR_OCTAVES):
        parts += [np.sin((2.0**k) * d), np.cos((2.0**k) * d)]
    return np.concatenate(parts, axis=1)


@dataclass
class DecoderMLP:
    """Two affine layers with a ReLU between and a logistic output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, in_dim, hidden, rng):
        w1 = rng.uniform(-1, 1, (hidden, in_dim)) * np.sqrt(6.0 / in_dim)
        w2 = rng.uniform(-1, 1, (3, hidden)) * np.sqrt(3.0 / hidden)
        return cls(w1, np.zeros(hidden), w2, np.zeros(3))

    def forward(self, x):
        """Rows ``x (N, in_dim)`` -> colours ``(N, 3)`` and a pullback."""
        h = x @ self.w1.T
        h += self.b1
        np.maximum(h, 0.0, out=h)
        y = sigmoid(h @ self.w2.T + self.b2)

        def pullback(dy):
            dz = dy * y * (1.0 - y)
            dh = dz @ self.w2
            dh *= h > 0
            grads = {
                "decoder.w2": dz.T @ h,
                "decoder.b2": dz.sum(axis=0),
                "decoder.w1": dh.T @ x,
                "decoder.b1": dh.sum(axis=0),
            }
            return dh @ self.w1, grads

        return y, pullback


def extract_multiscale(ms: MultiScaleGrid, plan: GridPlan, index):
    """Blend per-scale components at fractional scale indices.

    Returns components shaped like a single-scale sample and a pullback giving
    stacked ``(S, ...)`` factor gradients. Interpolation, factor products and
    the blend run in one compiled pass per factor pair.
    """
    rows, pb = _extract_rows(ms, plan, index)
    axes = tuple(range(1, rows.ndim)) + (0,)
    back = (rows.ndim - 1,) + tuple(range(rows.ndim - 1))
    return rows.transpose(axes), lambda cot: pb(cot.transpose(back))


def _extract_rows(ms: MultiScaleGrid, plan: GridPlan, index):
    """Point-major version of :func:`extract_multiscale` (``(N, 3, R)`` or ``(N, R)``)."""
    sidx, sw = scale_slots(index, ms.scales, plan.size)
    fused = vm_multiscale if ms.family is FactorGridVM else planes_multiscale
    return fused(ms.stacked, plan, sidx, sw)


def extract_multiscale_reference(ms: MultiScaleGrid, plan: GridPlan, index):
    """Per-scale subset version of :func:`extract_multiscale` (plain numpy)."""
    n = plan.size
    weights = blend_weights(index, ms.scales)
    if weights.shape[1] == 1 and n > 1:
        weights = np.repeat(weights, n, axis=1)
    out = None
    pieces = []
    for s in range(ms.scales):
        sel = np.flatnonzero(weights[s] > 0)
        if sel.size == 0:
            continue
        full = sel.size == n
        sub = plan if full else plan.take(sel)
        comps, pb = components(ms.scale(s), sub)
        w = weights[s] if full else weights[s, sel]
        if out is None:
            out = np.zeros(comps.shape[:-1] + (n,), dtype=comps.dtype)
        if full:
            out += comps * w
        else:
            out[..., sel] += comps * w
        pieces.append((s, None if full else sel, w, pb))

    def pullback(cot):
        stacked = [np.zeros((ms.scales,) + f.shape[1:], dtype=cot.dtype) for f in ms.stacked]
        for s, sel, w, pb in pieces:
            c = cot if sel is None else cot[..., sel]
            for acc, g in zip(stacked, pb(c * w)):
                acc[s] += g
        return stacked

    return out, pullback


def extract_scaled(grid, bank: Optional[MipKernelBank], points, index) -> np.ndarray:
    """Features of ``grid`` filtered by ``bank`` at a fractional scale index.

    ``points`` are normalized to ``[-1, 1]^3``; with ``bank=None`` the shared
    grid is sampled directly.
    """
    pts = np.asarray(points, dtype=np.float64)
    plan = GridPlan.build(pts, grid.resolution)
    if bank is None:
        comps, _ = components(grid, plan)
    else:
        ms, _ = generate(grid, bank)
        comps, _ = extract_multiscale(ms, plan, index)
    return comps[..., 0] if pts.ndim == 1 else comps


def extract_2d(fld: "RadianceField", points, coord: ScaleCoordinate, which="appearance"):
    """Average of bank-A features at the primary index and bank-B at the secondary."""
    if coord.kind != "2d":
        raise ValueError(f"expected a 2d scale coordinate, got {coord.kind!r}")
    banks = fld.banks[which]
    if len(banks) != 2:
        raise ValueError("field is not configured with two kernel banks")
    grid = fld.grids[which]
    p = np.asarray(points, dtype=np.float64) / fld.config.bound
    ia = fld.index_maps[0](coord.primary)
    ib = fld.index_maps[1](coord.secondary)
    return 0.5 * (extract_scaled(grid, banks[0], p, ia) + extract_scaled(grid, banks[1], p, ib))


class RadianceField:
    """Density and appearance grids, their kernel banks and the colour decoder."""

    def __init__(
        self,
        config: FieldConfig,
        grids: dict,
        banks: dict,
        basis: np.ndarray,
        decoder: DecoderMLP,
        density_shift,
        index_maps: tuple = (),
    ):
        self.config = config
        self.grids = grids
        self.banks = banks
        self.basis = basis
        self.decoder = decoder
        self.density_shift = np.asarray(density_shift, dtype=np.float64).reshape(())
        self.index_maps = tuple(index_maps)
        self.version = 0
        self._cache = {}
        for which in ("density", "appearance"):
            if len(banks[which]) != config.bank_count:
                raise ValueError(f"{which} needs {config.bank_count} kernel bank(s)")
            for b in banks[which]:
                b.check_matches(grids[which])
        if config.bank_count and len(self.index_maps) < config.bank_count:
            raise ValueError("one scale index map is required per kernel bank")

    @classmethod
    def create(cls, config: FieldConfig, rng: np.random.Generator, index_maps=()):
        grid_cls = FactorGridVM if config.family == "vm" else PlaneGrid
        grids = {
            "density": grid_cls.random(config.resolution, config.density_rank, rng),
            "appearance": grid_cls.random(config.resolution, config.appearance_rank, rng),
        }
        banks = {}
        for which, g in grids.items():
            banks[which] = [
                init_gaussian(config.scales, config.kernel_size, config.stdevs, g)
                for _ in range(config.bank_count)
            ]
        feat_dim = config.appearance_rank * (3 if config.family == "vm" else 1)
        basis = rng.standard_normal((config.appearance_channels, feat_dim)) / np.sqrt(feat_dim)
        decoder = DecoderMLP.create(config.appearance_channels + DIR_ENC_DIM, config.hidden, rng)
        return cls(config, grids, banks, basis, decoder, config.density_shift, index_maps)

    # ------------------------------------------------------------------ params

    def parameters(self) -> dict:
        """Named views of every trainable array (updated in place by optimizers)."""
        params = {}
        for which in ("density", "appearance"):
            g = self.grids[which]
            for name, arr in zip(g.factor_names, g.factors):
                params[f"{which}.{name}"] = arr
            for i, bank in enumerate(self.banks[which]):
                for name, arr in zip(g.factor_names, bank.kernels):
                    params[f"{which}.bank{i}.{name}"] = arr
        params["basis"] = self.basis
        params["decoder.w1"] = self.decoder.w1
        params["decoder.b1"] = self.decoder.b1
        params["decoder.w2"] = self.decoder.w2
        params["decoder.b2"] = self.decoder.b2
        params["density_shift"] = self.density_shift
        return params

    def kernel_names(self, fixed_only: bool = False) -> list:
        names = []
        for which in ("density", "appearance"):
            g = self.grids[which]
            for i, bank in enumerate(self.banks[which]):
                if fixed_only and bank.trainable:
                    continue
                names += [f"{which}.bank{i}.{n}" for n in g.factor_names]
        return names

    def load_parameters(self, arrays: dict) -> None:
        """Replace parameters by name; shapes may change (e.g. after upsampling)."""
        for which in ("density", "appearance"):
            g = self.grids[which]
            facs = [np.array(arrays.get(f"{which}.{n}", a)) for n, a in zip(g.factor_names, g.factors)]
            self.grids[which] = type(g).from_factors(facs)
            for i, bank in enumerate(self.banks[which]):
                ks = [
                    np.array(arrays.get(f"{which}.bank{i}.{n}", k))
                    for n, k in zip(g.factor_names, bank.kernels)
                ]
                self.banks[which][i] = MipKernelBank(tuple(ks), bank.trainable)
        self.basis = np.array(arrays.get("basis", self.basis))
        for n in ("w1", "b1", "w2", "b2"):
            setattr(self.decoder, n, np.array(arrays.get(f"decoder.{n}", getattr(self.decoder, n))))
        self.density_shift = np.array(arrays.get("density_shift", self.density_shift), dtype=np.float64).reshape(())
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified; invalidates cached multi-scale grids."""
        self.version += 1
        self._cache.clear()

    def upsample(self, resolution) -> None:
        for which in ("density", "appearance"):
            self.grids[which] = upsample(self.grids[which], resolution)
        self.config.resolution = tuple(int(r) for r in resolution)
        self.touch()

    # ----------------------------------------------------------------- forward

    def _generated(self, which, i):
        key = (which, i)
        hit = self._cache.get(key)
        if hit is not None and hit[0] == self.version:
            return hit[1], hit[2]
        ms, pb = generate(self.grids[which], self.banks[which][i])
        self._cache[key] = (self.version, ms, pb)
        return ms, pb

    def multiscale(self, which="appearance", bank=0) -> MultiScaleGrid:
        return self._generated(which, bank)[0]

    def _features(self, which, plan, indices):
        """Point-major features ``(N, F)`` and a pullback to named gradients."""
        grid = self.grids[which]
        prefix = which + "."
        n = plan.size
        if not self.banks[which]:
            single = MultiScaleGrid(type(grid), tuple(f[None] for f in grid.factors))
            comps, pb = _extract_rows(single, plan, None)

            def pullback(cot):
                grads = pb(cot.reshape(comps.shape))
                return {prefix + k: g[0] for k, g in zip(grid.factor_names, grads)}

            return comps.reshape(n, -1), pullback

        parts = []
        for i, idx in enumerate(indices[: len(self.banks[which])]):
            ms, gen_pb = self._generated(which, i)
            comps, ext_pb = _extract_rows(ms, plan, idx)
            parts.append((comps, ext_pb, gen_pb))
        shape = parts[0][0].shape
        scale = 1.0 / len(parts)
        comps = parts[0][0] if len(parts) == 1 else scale * sum(p[0] for p in parts)

        def pullback(cot):
            cot = cot.reshape(shape)
            grads = {}
            for i, (_, ext_pb, gen_pb) in enumerate(parts):
                dshared, dker = gen_pb(ext_pb(cot * scale if len(parts) > 1 else cot))
                for n, g in zip(grid.factor_names, dshared):
                    key = prefix + n
                    grads[key] = grads[key] + g if key in grads else g
                for n, g in zip(grid.factor_names, dker):
                    grads[f"{prefix}bank{i}.{n}"] = g
            return grads

        return comps.reshape(n, -1), pullback

    def scale_indices(self, primary, secondary=None):
        if self.config.bank_count == 0:
            return ()
        idx = [self.index_maps[0](primary)]
        if self.config.bank_count == 2:
            if secondary is None:
                raise ValueError("the 2d scale coordinate needs a secondary value")
            idx.append(self.index_maps[1](secondary))
        return tuple(idx)

    def forward(self, points, dirs, primary, secondary=None, need_grad=True):
        """Evaluate density ``(N,)`` and colour ``(N, 3)`` at world points.

        ``primary``/``secondary`` are per-point scale values (or scalars).
        ``dirs`` may hold one row per point, or one row per group of
        ``N // len(dirs)`` consecutive points (e.g. per ray). Returns ``(sigma, rgb, pullback)``; ``pullback(dsigma, drgb)`` gives a
        dict of gradients keyed like :meth:`parameters`.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.config.bound
        plan = GridPlan.build(pts, self.config.resolution)
        indices = self.scale_indices(primary, secondary)
        n = pts.shape[0]
        d_feats, d_pb = self._features("density", plan, indices)
        pre = d_feats.sum(axis=1) + self.density_shift
        sigma = softplus(pre)

        feats, a_pb = self._features("appearance", plan, indices)
        chans = feats @ self.basis.T
        enc = encode_direction(dirs)
        if enc.shape[0] != n:
            if enc.shape[0] == 0 or n % enc.shape[0]:
                raise ValueError(f"{enc.shape[0]} directions cannot be shared by {n} points")
            enc = np.repeat(enc, n // enc.shape[0], axis=0)
        rgb, dec_pb = self.decoder.forward(np.concatenate([chans, enc], axis=1))

        if not need_grad:
            return sigma, rgb, None

        def pullback(dsigma, drgb):
            dpre = np.asarray(dsigma).reshape(n) * sigmoid(pre)
            grads = {"density_shift": np.asarray(dpre.sum())}
            grads.update(d_pb(np.broadcast_to(dpre[:, None], d_feats.shape)))
            dx, dec_grads = dec_pb(np.asarray(drgb).reshape(n, 3))
            grads.update(dec_grads)
            dchans = dx[:, : chans.shape[1]]
            grads["basis"] = dchans.T @ feats
            grads.update(a_pb(dchans @ self.basis))
            return grads

        return sigma, rgb, pullback

    # ----------------------------------------------------------- conveniences

    def _coord_values(self, coord: ScaleCoordinate):
        return coord.primary, coord.secondary

    def density(self, x, coord: ScaleCoordinate):
        x = np.asarray(x, dtype=np.float64)
        p, s = self._coord_values(coord)
        sigma, _, _ = self.forward(x.reshape(-1, 3), np.array([0.0, 0.0, 1.0]), p, s, need_grad=False)
        return float(sigma[0]) if x.ndim == 1 else sigma

    def color(self, x, d, coord: ScaleCoordinate):
        x = np.asarray(x, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("view direction must be non-zero")
        d = d / norms
        p, s = self._coord_values(coord)
        _, rgb, _ = self.forward(x.reshape(-1, 3), d, p, s, need_grad=False)
        return rgb[0] if x.ndim == 1 else rgb
