"""Pinhole cameras, stratified ray sampling and emission-absorption compositing.

Camera axes follow the OpenGL convention: +x right, +y up, the camera looks
down -z. Ray directions are unit length, so sample distances ``t`` are
Euclidean distances from the ray origin.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .scalecoord import discrete_scale


@dataclass
class CameraModel:
    focal_x: float
    focal_y: float
    width: int
    height: int
    camera_to_world: np.ndarray
    near: float
    far: float
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.camera_to_world.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        rot = self.camera_to_world[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    def rescaled(self, fraction) -> "CameraModel":
        """Same view at ``fraction`` of the resolution (focal and size scale)."""
        fr = Fraction(fraction).limit_denominator(1 << 16)
        if fr <= 0:
            raise ValueError("resolution fraction must be positive")
        w, h = self.width * fr, self.height * fr
        if w.denominator != 1 or h.denominator != 1:
            raise ValueError(f"{self.width}x{self.height} is not divisible by {fr}")
        f = float(fr)
        return replace(
            self,
            width=int(w),
            height=int(h),
            focal_x=self.focal_x * f,
            focal_y=self.focal_y * f,
            cx=self.cx * f,
            cy=self.cy * f,
            camera_to_world=self.camera_to_world.copy(),
        )

    def downsampled(self, factor: int) -> "CameraModel":
        return self.rescaled(Fraction(1, int(factor)))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    upv = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, upv, back, eye
    return m


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    s_disc: np.ndarray
    near: np.ndarray
    far: np.ndarray
    rgb: Optional[np.ndarray] = None
    weight: Optional[np.ndarray] = None
    factor: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.origins.shape[0]
        if self.weight is None:
            self.weight = np.ones(n)
        if np.any(self.weight <= 0):
            raise ValueError("ray weights must be positive")

    def __len__(self):
        return self.origins.shape[0]

    def take(self, sel) -> "RayBatch":
        pick = lambda a: None if a is None else a[sel]
        return RayBatch(
            self.origins[sel],
            self.directions[sel],
            self.s_disc[sel],
            self.near[sel],
            self.far[sel],
            pick(self.rgb),
            pick(self.weight),
            pick(self.factor),
        )

    @staticmethod
    def concat(batches) -> "RayBatch":
        def cat(name):
            vals = [getattr(b, name) for b in batches]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return RayBatch(*(cat(n) for n in ("origins", "directions", "s_disc", "near", "far", "rgb", "weight", "factor")))


def camera_rays(camera: CameraModel, u, v):
    """Rays through continuous image-plane coordinates (pixel units)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    dirs_cam = np.stack(
        [(u - camera.cx) / camera.focal_x, -(v - camera.cy) / camera.focal_y, -np.ones_like(u)], axis=1
    )
    dirs = dirs_cam @ camera.camera_to_world[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def generate_rays(camera: CameraModel, pixels=None) -> RayBatch:
    """One ray through each pixel centre.

    ``pixels`` is an ``(N, 2)`` integer array of ``(column, row)`` pairs;
    ``None`` selects every pixel in row-major order.
    """
    if pixels is None:
        rows, cols = np.mgrid[0 : camera.height, 0 : camera.width]
        cols, rows = cols.ravel(), rows.ravel()
    else:
        px = np.asarray(pixels).reshape(-1, 2)
        cols, rows = px[:, 0], px[:, 1]
        if np.any(cols < 0) or np.any(rows < 0) or np.any(cols >= camera.width) or np.any(rows >= camera.height):
            raise ValueError("pixel coordinates outside the image")
    origins, dirs = camera_rays(camera, cols + 0.5, rows + 0.5)
    n = origins.shape[0]
    return RayBatch(
        origins,
        dirs,
        np.full(n, discrete_scale(camera)),
        np.full(n, float(camera.near)),
        np.full(n, float(camera.far)),
    )


@dataclass
class SamplePoint:
    position: np.ndarray
    t: float
    delta: float


def stratified_t(near, far, n_samples: int, rng: Optional[np.random.Generator] = None):
    """Stratified distances ``(B, n)`` and segment lengths.

    One uniform draw per equal sub-interval of ``[near, far]``; ``rng=None``
    uses bin midpoints. The last segment runs to ``far``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    width = (far - near) / n_samples
    if rng is None:
        u = np.full((near.size, n_samples), 0.5)
    else:
        u = rng.random((near.size, n_samples))
    t = near[:, None] + (np.arange(n_samples)[None, :] + u) * width[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    return t, delta


def stratified_samples(origin, direction, near, far, n_samples, rng=None) -> list:
    t, delta = stratified_t(near, far, n_samples, rng)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return [SamplePoint(o + ti * d, float(ti), float(di)) for ti, di in zip(t[0], delta[0])]


def composite_vjp(sigma, rgb, delta, background=0.0):
    """Alpha compositing with a pullback ``(drgb_out) -> (dsigma, drgb)``.

    Shapes: ``sigma``/``delta`` ``(B, n)``, ``rgb`` ``(B, n, 3)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    weights = trans * alpha
    opacity = weights.sum(axis=-1)
    out = np.einsum("bn,bnc->bc", weights, rgb) + (1.0 - opacity)[:, None] * bg

    def pullback(dout):
        dout = np.asarray(dout, dtype=np.float64)
        drgb = weights[..., None] * dout[:, None, :]
        e = weights * np.einsum("bnc,bc->bn", rgb - bg, dout)
        after = e.sum(axis=-1, keepdims=True) - np.cumsum(e, axis=-1)
        trans_next = trans - weights
        dtau = trans_next * np.einsum("bnc,bc->bn", rgb - bg, dout) - after
        return dtau * delta, drgb

    return (out, opacity, weights), pullback


def composite(sigma, rgb, delta, background=0.0):
    """Returns ``(rgb, opacity, weights)`` for each ray."""
    return composite_vjp(sigma, rgb, delta, background)[0]


def sample_scale_values(kind: str, s_disc, t):
    """Per-sample scale values for one coordinate kind -> ``(primary, secondary)``."""
    s = np.asarray(s_disc, dtype=np.float64)[:, None]
    if kind == "disc":
        return np.broadcast_to(s, t.shape).ravel(), None
    if kind == "cont":
        return (s * t).ravel(), None
    if kind == "2d":
        return (s * t).ravel(), t.ravel()
    raise ValueError(f"unknown scale coordinate kind {kind!r}")


def render_rays(
    field,
    batch: RayBatch,
    n_samples: int,
    rng=None,
    background=0.0,
    need_grad=True,
    scale_override=None,
):
    """Volume-render a ray batch through ``field``.

    ``scale_override`` may pin the primary and/or secondary scale values
    (``(primary, secondary)``, ``None`` entries keep the per-sample values).
    Returns ``(rgb (B, 3), opacity (B,), pullback)``; the pullback maps
    ``d rgb`` to the field's parameter gradients.
    """
    t, delta = stratified_t(batch.near, batch.far, n_samples, rng)
    pts = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    primary, secondary = sample_scale_values(field.config.scale_kind, batch.s_disc, t)
    if scale_override is not None:
        p_over, s_over = scale_override
        if p_over is not None:
            primary = np.full(t.size, float(p_over))
        if s_over is not None:
            secondary = np.full(t.size, float(s_over))
    sigma, rgb, field_pb = field.forward(pts.reshape(-1, 3), batch.directions, primary, secondary, need_grad)
    b, n = t.shape
    (out, opacity, _), comp_pb = composite_vjp(sigma.reshape(b, n), rgb.reshape(b, n, 3), delta, background)
    if not need_grad:
        return out, opacity, None

    def pullback(dout):
        dsigma, drgb = comp_pb(dout)
        return field_pb(dsigma.ravel(), drgb.reshape(-1, 3))

    return out, opacity, pullback


def render_image(field, camera: CameraModel, n_samples=128, background=0.0, chunk=4096, scale_override=None):
    """Deterministic (midpoint-sampled) render of a full image ``(H, W, 3)``."""
    rays = generate_rays(camera)
    out = np.empty((len(rays), 3))
    for start in range(0, len(rays), chunk):
        sel = slice(start, start + chunk)
        rgb, _, _ = render_rays(
            field, rays.take(sel), n_samples, None, background, need_grad=False, scale_override=scale_override
        )
        out[sel] = rgb
    return out.reshape(camera.height, camera.width, 3)
