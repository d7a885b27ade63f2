"""Compiled interpolation loops (numba) and their plain numpy references.

The fused kernels evaluate factor products on up to ``P`` scale slots per
point: slot ``p`` of point ``j`` reads scale ``sidx[p, j]`` of the stacked
factors with blend weight ``sw[p, j]``.
"""

from __future__ import annotations

import numba
import numpy as np


def gather_numpy(flat, idx, w):
    return np.einsum("rkn,kn->rn", flat[:, idx], w)


def scatter_numpy(grad, idx, w, size):
    rank = grad.shape[0]
    offsets = (np.arange(rank) * size)[:, None, None]
    flat_idx = (offsets + idx[None]).ravel()
    vals = (grad[:, None, :] * w[None]).ravel()
    return np.bincount(flat_idx, vals, minlength=rank * size).reshape(rank, size)


_jit = numba.njit(cache=True, fastmath=False)

@_jit
def _gather(flat, idx, w):
    rank = flat.shape[0]
    k, n = idx.shape
    out = np.zeros((rank, n))
    for r in range(rank):
        for j in range(n):
            acc = 0.0
            for c in range(k):
                acc += w[c, j] * flat[r, idx[c, j]]
            out[r, j] = acc
    return out

@_jit
def _scatter(grad, idx, w, size):
    rank, n = grad.shape
    k = idx.shape[0]
    out = np.zeros((rank, size))
    for r in range(rank):
        for j in range(n):
            g = grad[r, j]
            for c in range(k):
                out[r, idx[c, j]] += w[c, j] * g
    return out

# Fused kernels work on rank-last copies ``(S, M, R)`` so the inner loop
# over ranks is contiguous and each point's stencil is read once.

@_jit
def _vm_term_fwd(out, vec, mat, lidx, lw, pidx, pw, sidx, sw):
    rank = vec.shape[2]
    slots, n = sidx.shape
    lv = np.empty((slots, n, rank))
    mv = np.empty((slots, n, rank))
    for j in range(n):
        for p in range(slots):
            s = sidx[p, j]
            b = sw[p, j]
            l0, l1 = lidx[0, j], lidx[1, j]
            a0, a1 = lw[0, j], lw[1, j]
            q0, q1, q2, q3 = pidx[0, j], pidx[1, j], pidx[2, j], pidx[3, j]
            c0, c1, c2, c3 = pw[0, j], pw[1, j], pw[2, j], pw[3, j]
            for r in range(rank):
                l = a0 * vec[s, l0, r] + a1 * vec[s, l1, r]
                m = c0 * mat[s, q0, r] + c1 * mat[s, q1, r] + c2 * mat[s, q2, r] + c3 * mat[s, q3, r]
                lv[p, j, r] = l
                mv[p, j, r] = m
                out[j, r] += b * l * m
    return lv, mv

@_jit
def _vm_term_bwd(cot, lv, mv, lidx, lw, pidx, pw, sidx, sw, n_scales, n_vec, n_mat):
    slots, n, rank = lv.shape
    dvec = np.zeros((n_scales, n_vec, rank))
    dmat = np.zeros((n_scales, n_mat, rank))
    for j in range(n):
        for p in range(slots):
            b = sw[p, j]
            if b == 0.0:
                continue
            s = sidx[p, j]
            l0, l1 = lidx[0, j], lidx[1, j]
            a0, a1 = lw[0, j], lw[1, j]
            q0, q1, q2, q3 = pidx[0, j], pidx[1, j], pidx[2, j], pidx[3, j]
            c0, c1, c2, c3 = pw[0, j], pw[1, j], pw[2, j], pw[3, j]
            for r in range(rank):
                g = b * cot[j, r]
                dl = g * mv[p, j, r]
                dm = g * lv[p, j, r]
                dvec[s, l0, r] += a0 * dl
                dvec[s, l1, r] += a1 * dl
                dmat[s, q0, r] += c0 * dm
                dmat[s, q1, r] += c1 * dm
                dmat[s, q2, r] += c2 * dm
                dmat[s, q3, r] += c3 * dm
    return dvec, dmat

@_jit
def _plane_fwd(p0, p1, p2, i0, w0, i1, w1, i2, w2, sidx, sw):
    rank = p0.shape[2]
    slots, n = sidx.shape
    out = np.zeros((n, rank))
    vals = np.empty((3, slots, n, rank))
    for j in range(n):
        for p in range(slots):
            s = sidx[p, j]
            b = sw[p, j]
            for r in range(rank):
                x = 0.0
                y = 0.0
                z = 0.0
                for c in range(4):
                    x += w0[c, j] * p0[s, i0[c, j], r]
                    y += w1[c, j] * p1[s, i1[c, j], r]
                    z += w2[c, j] * p2[s, i2[c, j], r]
                vals[0, p, j, r] = x
                vals[1, p, j, r] = y
                vals[2, p, j, r] = z
                out[j, r] += b * x * y * z
    return out, vals

@_jit
def _plane_bwd(cot, vals, i0, w0, i1, w1, i2, w2, sidx, sw, n_scales, m0, m1, m2):
    _, slots, n, rank = vals.shape
    d0 = np.zeros((n_scales, m0, rank))
    d1 = np.zeros((n_scales, m1, rank))
    d2 = np.zeros((n_scales, m2, rank))
    for j in range(n):
        for p in range(slots):
            b = sw[p, j]
            if b == 0.0:
                continue
            s = sidx[p, j]
            for r in range(rank):
                g = b * cot[j, r]
                x = vals[0, p, j, r]
                y = vals[1, p, j, r]
                z = vals[2, p, j, r]
                for c in range(4):
                    d0[s, i0[c, j], r] += w0[c, j] * g * y * z
                    d1[s, i1[c, j], r] += w1[c, j] * g * x * z
                    d2[s, i2[c, j], r] += w2[c, j] * g * x * y
    return d0, d1, d2

def gather_flat(flat, idx, w):
    return _gather(np.ascontiguousarray(flat, dtype=np.float64), idx, w)

def scatter_flat(grad, idx, w, size):
    return _scatter(np.ascontiguousarray(grad, dtype=np.float64), idx, w, size)


def _rank_last(a):
    """``(S, R, ...)`` -> contiguous ``(S, M, R)``."""
    return np.ascontiguousarray(a.reshape(a.shape[0], a.shape[1], -1).transpose(0, 2, 1), dtype=np.float64)


def _rank_first(d, shape):
    return np.ascontiguousarray(d.transpose(0, 2, 1)).reshape(shape)


def vm_multiscale(stacked, plan, sidx, sw):
    """Blended VM components, point-major ``(N, 3, R)``, from stacked ``(S, R, ...)`` factors."""
    vecs = [_rank_last(v) for v in stacked[:3]]
    mats = [_rank_last(m) for m in stacked[3:]]
    out = np.zeros((plan.size, 3, vecs[0].shape[2]))
    saved = []
    for a in range(3):
        lp, pp = plan.lines[a], plan.planes[a]
        saved.append(_vm_term_fwd(out[:, a], vecs[a], mats[a], lp.idx, lp.w, pp.idx, pp.w, sidx, sw))

    def pullback(cot):
        cot = np.asarray(cot, dtype=np.float64)
        dvecs, dmats = [], []
        for a in range(3):
            lp, pp = plan.lines[a], plan.planes[a]
            lv, mv = saved[a]
            dv, dm = _vm_term_bwd(
                cot[:, a], lv, mv, lp.idx, lp.w, pp.idx, pp.w,
                sidx, sw, vecs[a].shape[0], vecs[a].shape[1], mats[a].shape[1],
            )
            dvecs.append(_rank_first(dv, stacked[a].shape))
            dmats.append(_rank_first(dm, stacked[3 + a].shape))
        return dvecs + dmats

    return out, pullback


def planes_multiscale(stacked, plan, sidx, sw):
    """Blended tri-plane components, point-major ``(N, R)``, from stacked ``(S, R, ...)`` planes."""
    ps = [_rank_last(p) for p in stacked]
    pl = plan.planes
    out, vals = _plane_fwd(ps[0], ps[1], ps[2], pl[0].idx, pl[0].w, pl[1].idx, pl[1].w, pl[2].idx, pl[2].w, sidx, sw)

    def pullback(cot):
        ds = _plane_bwd(
            np.ascontiguousarray(cot, dtype=np.float64), vals,
            pl[0].idx, pl[0].w, pl[1].idx, pl[1].w, pl[2].idx, pl[2].w, sidx, sw,
            ps[0].shape[0], ps[0].shape[1], ps[1].shape[1], ps[2].shape[1],
        )
        return [_rank_first(d, s.shape) for d, s in zip(ds, stacked)]

    return out, pullback


SNAP = 1e-9  # indices this close to an integer use a single scale


def scale_slots(index, n_scales: int, n_points: int):
    """Scale indices and blend weights per point -> ``sidx, sw`` of shape ``(P, N)``.

    ``P`` is 1 when every index is integral, else 2 (floor and ceil).
    """
    if index is None:
        return np.zeros((1, n_points), dtype=np.intp), np.ones((1, n_points))
    idx = np.broadcast_to(np.asarray(index, dtype=np.float64).reshape(-1), (n_points,))
    idx = np.clip(idx, 0.0, n_scales - 1)
    near = np.round(idx)
    idx = np.where(np.abs(idx - near) < SNAP, near, idx)
    lo = np.floor(idx).astype(np.intp)
    frac = idx - lo
    if not np.any(frac > 0):
        return lo[None].copy(), np.ones((1, n_points))
    hi = np.minimum(lo + 1, n_scales - 1)
    return np.stack([lo, hi]), np.stack([1.0 - frac, frac])
