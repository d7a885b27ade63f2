"""Scale-aware coordinates and their mapping to fractional scale indices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

KINDS = ("disc", "cont", "2d")
RADIUS_FACTOR = 2.0 / math.sqrt(12.0)


@dataclass(frozen=True)
class ScaleCoordinate:
    kind: str
    primary: float
    secondary: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scale coordinate kind {self.kind!r}")
        if not (np.isfinite(self.primary) and self.primary > 0):
            raise ValueError("scale value must be positive and finite")
        if (self.secondary is not None) != (self.kind == "2d"):
            raise ValueError("a secondary value is required exactly for the 2d kind")
        if self.secondary is not None and not (np.isfinite(self.secondary) and self.secondary > 0):
            raise ValueError("secondary scale value must be positive and finite")


def discrete_scale(camera=None, *, focal_x=None, focal_y=None) -> float:
    """Mean world-space pixel size at unit depth, times ``2 / sqrt(12)``."""
    fx = camera.focal_x if camera is not None else focal_x
    fy = camera.focal_y if camera is not None else focal_y
    if fx is None or fy is None or fx <= 0 or fy <= 0:
        raise ValueError("focal lengths must be positive")
    return (0.5 * (1.0 / fx + 1.0 / fy)) * RADIUS_FACTOR


def continuous_scale(s_disc, t):
    """Discrete scale times the distance from the ray origin."""
    s_disc = np.asarray(s_disc, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s_disc <= 0):
        raise ValueError("discrete scale must be positive")
    if np.any(t <= 0):
        raise ValueError("ray distance must be positive")
    out = s_disc * t
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScaleIndexMap:
    """Piecewise-linear map from log2 scale value to a fractional index.

    ``anchors[k]`` is the scale value that maps exactly to index ``k``.
    Values outside the anchor range clamp to ``0`` or ``S - 1``.
    """

    anchors: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        object.__setattr__(self, "anchors", tuple(float(v) for v in a))
        if a.ndim != 1 or a.size < 1:
            raise ValueError("anchors must be a non-empty 1-D sequence")
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("anchors must be positive and finite")
        d = np.diff(a)
        if a.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("anchors must be strictly monotone")

    @property
    def scales(self) -> int:
        return len(self.anchors)

    def __call__(self, value):
        return to_fractional_index(self, value)


def to_fractional_index(index_map: ScaleIndexMap, value):
    v = np.asarray(value, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("scale values must be positive")
    s = index_map.scales
    if s == 1:
        out = np.zeros_like(v)
    else:
        xs = np.log2(np.asarray(index_map.anchors))
        ys = np.arange(s, dtype=np.float64)
        if xs[0] > xs[-1]:
            xs, ys = xs[::-1], ys[::-1]
        out = np.interp(np.log2(v), xs, ys)
    return float(out) if out.ndim == 0 else out


def default_anchors(base_s_disc: float, factors, scales: Optional[int] = None) -> ScaleIndexMap:
    """Anchors at the training scales: ``base_s_disc * factor``."""
    f = [float(x) for x in factors]
    if scales is not None and len(f) != scales:
        raise ValueError(f"{len(f)} factors given for {scales} scales")
    if any(x <= 0 for x in f):
        raise ValueError("factors must be positive")
    if any(b <= a for a, b in zip(f, f[1:])):
        raise ValueError("factors must be strictly ascending")
    if base_s_disc <= 0:
        raise ValueError("base scale must be positive")
    return ScaleIndexMap(tuple(base_s_disc * x for x in f))


def quantile_anchors(distances, scales: int) -> ScaleIndexMap:
    """Anchors at evenly spaced quantiles of observed ray distances."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    qs = (np.arange(scales) + 0.5) / scales
    a = np.quantile(d, qs)
    # guard against ties on degenerate inputs
    for i in range(1, scales):
        if a[i] <= a[i - 1]:
            a[i] = a[i - 1] * (1.0 + 1e-6)
    return ScaleIndexMap(tuple(a))


def blend_weights(index, scales: int) -> np.ndarray:
    """Hat-function weights ``(S, N)`` blending neighbouring integer scales.

    Indices are clamped to ``[0, S - 1]`` so the weights always sum to one.
    """
    idx = np.clip(np.asarray(index, dtype=np.float64).reshape(-1), 0.0, scales - 1)
    s = np.arange(scales, dtype=np.float64)[:, None]
    return np.maximum(0.0, 1.0 - np.abs(idx[None, :] - s))
