"""Multi-scale datasets: Blender-format I/O, downsampling and a procedural scene."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .pngio import read_png, write_png
from .render import CameraModel, camera_rays, look_at

BLENDER_NEAR, BLENDER_FAR = 2.0, 6.0


class DatasetError(ValueError):
    pass


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: CameraModel
    name: str = ""


@dataclass
class MultiScaleDataset:
    """Train/test views keyed by integer downsampling factor."""

    train: dict
    test: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for split in (self.train, self.test):
            counts = {len(v) for v in split.values()}
            if len(counts) > 1:
                raise DatasetError("every scale must hold the same number of views")

    @property
    def factors(self) -> tuple:
        return tuple(sorted(self.train))


# ------------------------------------------------------------- blender io


def focal_from_fov(camera_angle_x: float, width: int) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def _load_split(root: Path, split: str, background, near, far) -> list:
    path = root / f"transforms_{split}.json"
    if not path.exists():
        raise DatasetError(f"missing {path.name} in {root}")
    try:
        meta = json.loads(path.read_text())
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed {path.name}: {exc}") from exc
    near = float(meta.get("near", near))
    far = float(meta.get("far", far))
    views = []
    for frame in frames:
        rel = frame["file_path"]
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"missing image {img_path}")
        rgba = read_png(img_path)
        if rgba.ndim != 3 or rgba.shape[2] != 4:
            raise DatasetError(f"{img_path} is not an RGBA image")
        alpha = rgba[..., 3:4]
        rgb = rgba[..., :3] * alpha + background * (1.0 - alpha)
        h, w = rgb.shape[:2]
        focal = focal_from_fov(angle, w)
        cam = CameraModel(focal, focal, w, h, np.array(frame["transform_matrix"], dtype=np.float64), near, far)
        views.append(View(rgb, cam, Path(rel).stem))
    return views


def load_blender(directory, background: float = 1.0, near=BLENDER_NEAR, far=BLENDER_FAR) -> MultiScaleDataset:
    """Load a single-scale Blender-format scene (``transforms_{train,test}.json``).

    RGBA images are composited onto ``background``. Optional ``near``/``far``
    keys in the JSON override the defaults.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    return MultiScaleDataset(
        {1: _load_split(root, "train", background, near, far)},
        {1: _load_split(root, "test", background, near, far)},
    )


def load_multiscale(directory, background: float = 1.0, factors=(1, 2, 4, 8)) -> MultiScaleDataset:
    """Load ``f1/ f2/ ...`` scale trees when present, else downsample the base."""
    root = Path(directory)
    trees = {f: root / f"f{f}" for f in factors}
    if all(p.is_dir() for p in trees.values()):
        train, test = {}, {}
        for f, p in trees.items():
            ds = load_blender(p, background)
            train[f], test[f] = ds.train[1], ds.test[1]
        return MultiScaleDataset(train, test)
    return make_multiscale(load_blender(root, background), factors)


def write_blender(views_train, views_test, directory, near=None, far=None) -> None:
    """Write views in Blender layout (RGBA PNG, alpha = 1)."""
    root = Path(directory)
    for split, views in (("train", views_train), ("test", views_test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        if not views:
            continue
        cam0 = views[0].camera
        meta = {"camera_angle_x": 2.0 * math.atan(0.5 * cam0.width / cam0.focal_x), "frames": []}
        if near is not None:
            meta["near"], meta["far"] = near, far
        for i, v in enumerate(views):
            rel = f"./{split}/r_{i:03d}"
            rgba = np.concatenate([v.image, np.ones(v.image.shape[:2] + (1,))], axis=2)
            write_png(root / f"{rel}.png", rgba)
            meta["frames"].append({"file_path": rel, "transform_matrix": v.camera.camera_to_world.tolist()})
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


def write_multiscale(ds: MultiScaleDataset, directory, near=None, far=None) -> None:
    for f in ds.factors:
        write_blender(ds.train[f], ds.test.get(f, []), Path(directory) / f"f{f}", near, far)


# ------------------------------------------------------------ downsampling


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Repeated 2x2 averaging; ``factor`` must be a power of two."""
    if factor < 1 or factor & (factor - 1):
        raise DatasetError(f"downsampling factor {factor} is not a power of two")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DatasetError(f"{w}x{h} image is not divisible by {factor}")
    out = img
    while factor > 1:
        h, w = out.shape[:2]
        out = out.reshape(h // 2, 2, w // 2, 2, *out.shape[2:]).mean(axis=(1, 3))
        factor //= 2
    return out


def make_multiscale(base: MultiScaleDataset, factors=(1, 2, 4, 8)) -> MultiScaleDataset:
    """Downsample a single-scale dataset and rescale its cameras."""
    if 1 not in base.train:
        raise DatasetError("base dataset must contain factor 1")

    def build(views):
        out = {}
        for f in factors:
            scaled = []
            for v in views:
                img = v.image.copy() if f == 1 else box_downsample(v.image, f)
                cam = v.camera if f == 1 else v.camera.downsampled(f)
                scaled.append(View(img, cam, v.name))
            out[f] = scaled
        return out

    return MultiScaleDataset(build(base.train[1]), build(base.test.get(1, [])) if base.test else {})


# -------------------------------------------------------- procedural scene


@dataclass
class ProceduralScene:
    """Sphere at the origin with a solid 3-D checkerboard texture."""

    radius: float = 1.0
    checker_size: float = 0.45
    color_a: tuple = (0.95, 0.85, 0.2)
    color_b: tuple = (0.1, 0.2, 0.6)
    background: float = 0.0

    def intersect(self, origins, dirs):
        """Nearest positive hit distance per ray (``inf`` on a miss)."""
        b = np.einsum("ij,ij->i", origins, dirs)
        c = np.einsum("ij,ij->i", origins, origins) - self.radius**2
        disc = b * b - c
        t = np.full(origins.shape[0], np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        near_hit = hit & (t0 > 0)
        far_hit = hit & ~near_hit & (t1 > 0)
        t[near_hit] = t0[near_hit]
        t[far_hit] = t1[far_hit]
        return t

    def texture(self, points):
        cell = np.floor(points / self.checker_size).astype(np.int64).sum(axis=1) % 2
        a, b = np.asarray(self.color_a), np.asarray(self.color_b)
        return np.where(cell[:, None] == 0, a, b)

    def shade(self, origins, dirs):
        t = self.intersect(origins, dirs)
        out = np.full((origins.shape[0], 3), float(self.background))
        hit = np.isfinite(t)
        if np.any(hit):
            pts = origins[hit] + t[hit, None] * dirs[hit]
            out[hit] = self.texture(pts)
        return out


def render_procedural(scene: ProceduralScene, camera: CameraModel, supersample: int = 16) -> np.ndarray:
    """Anti-aliased reference image: ``supersample**2`` samples per pixel on an integer sub-grid."""
    n = supersample
    offs = (np.arange(n) + 0.5) / n
    rows, cols = np.mgrid[0 : camera.height, 0 : camera.width]
    acc = np.zeros((camera.height * camera.width, 3))
    for dv in offs:
        for du in offs:
            o, d = camera_rays(camera, cols.ravel() + du, rows.ravel() + dv)
            acc += scene.shade(o, d)
    return (acc / (n * n)).reshape(camera.height, camera.width, 3)


def orbit_cameras(n, radius=4.0, width=64, focal=80.0, near=2.6, far=5.4, elevations=(-30.0, 50.0), phase=0.0):
    """Cameras on a sphere around the origin, azimuth evenly spaced."""
    cams = []
    lo, hi = elevations
    for i in range(n):
        az = 2 * math.pi * (i / n) + phase
        el = math.radians(lo + (hi - lo) * ((i * 0.618034) % 1.0))
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(CameraModel(focal, focal, width, width, look_at(eye), near, far))
    return cams


def procedural_dataset(
    scene: ProceduralScene = None,
    n_train: int = 24,
    n_test: int = 4,
    width: int = 64,
    focal: float = 80.0,
    radius: float = 4.0,
    near: float = 2.6,
    far: float = 5.4,
    factors=(1, 2, 4, 8),
    supersample: int = 16,
    phase: float = 0.0,
) -> MultiScaleDataset:
    """Render base views of the procedural scene and build the multi-scale set.

    Test cameras sit between the training azimuths; ``phase`` rotates both orbits.
    """
    scene = scene or ProceduralScene()
    train = orbit_cameras(n_train, radius, width, focal, near, far, phase=phase)
    test = orbit_cameras(n_test, radius, width, focal, near, far, phase=phase + math.pi / max(n_test, 1) + 0.37)
    base = MultiScaleDataset(
        {1: [View(render_procedural(scene, c, supersample), c, f"r_{i:03d}") for i, c in enumerate(train)]},
        {1: [View(render_procedural(scene, c, supersample), c, f"r_{i:03d}") for i, c in enumerate(test)]},
    )
    return make_multiscale(base, factors)
