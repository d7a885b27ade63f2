"""Optimization: weighted photometric loss, Adam, schedules and gradient checks."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field as dc_field, fields
from typing import Optional

import numpy as np

from .field import FieldConfig, RadianceField
from .render import RayBatch, generate_rays, render_image, render_rays
from .scalecoord import ScaleIndexMap, default_anchors, discrete_scale, quantile_anchors

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; ``block`` names the offender."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class TrainingAborted(RuntimeError):
    """Raised by :func:`run` on a non-finite step; carries the last good state."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    # data
    data_path: str = ""
    factors: tuple = (1, 2, 4, 8)
    background: float = 0.0
    near: float = 0.0
    far: float = 0.0
    # field
    family: str = "vm"
    resolution: tuple = (16, 16, 16)
    density_rank: int = 8
    appearance_rank: int = 16
    appearance_channels: int = 12
    hidden: int = 64
    bound: float = 1.2
    density_shift: float = -10.0
    # multi-scale
    scales: int = 4
    kernel_size: int = 3
    stdevs: tuple = (1.0, 1.5, 2.5, 4.0)
    learn_kernels: bool = True
    scale_kind: str = "disc"
    anchors: tuple = ()
    secondary_anchors: tuple = ()
    reference_distance: float = 0.0
    # optimization
    iterations: int = 3000
    batch_rays: int = 1024
    n_samples: int = 64
    lr_grid: float = 0.02
    lr_kernel: float = 0.001
    lr_decoder: float = 0.001
    lr_decay: float = 0.1
    upsample: tuple = ()
    kernel_start_iteration: int = 0
    loss_weights: tuple = ()
    seed: int = 0
    log_every: int = 100
    eval_every: int = 0
    eval_views: int = 1
    eval_samples: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr_grid", "lr_kernel", "lr_decoder"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        last_up = max((it for it, _ in self.upsample), default=0)
        if self.scales > 1 and self.kernel_start_iteration < last_up:
            raise ValueError("kernel_start_iteration must not precede the last upsampling")
        if self.loss_weights and len(self.loss_weights) != len(self.factors):
            raise ValueError("one loss weight per scale factor is required")
        self.field_config()

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            family=self.family,
            resolution=tuple(self.resolution),
            density_rank=self.density_rank,
            appearance_rank=self.appearance_rank,
            appearance_channels=self.appearance_channels,
            hidden=self.hidden,
            scales=self.scales,
            kernel_size=self.kernel_size,
            stdevs=tuple(self.stdevs) if self.scales > 1 else (),
            scale_kind=self.scale_kind,
            density_shift=self.density_shift,
            bound=self.bound,
        )

    def replace(self, **changes) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return TrainConfig(**vals)


# --------------------------------------------------------------------- loss


def ray_weights(factors, loss_weights=()) -> np.ndarray:
    """Per-ray loss multipliers normalized to unit mean over the given rays.

    Defaults to ``factor**2``: each downsampling level has 4x fewer pixels, so
    this gives every scale the same expected total weight.
    """
    f = np.asarray(factors, dtype=np.float64)
    if loss_weights:
        table = dict(loss_weights)
        w = np.array([table[x] for x in f])
    else:
        w = f**2
    return w / w.mean()


def weighted_loss(pred, target, weight):
    """Mean over rays of ``weight * ||pred - target||^2`` and its gradient."""
    resid = pred - target
    n = resid.shape[0]
    if n == 0:
        raise ValueError("empty ray batch")
    per_ray = (resid**2).sum(axis=1)
    value = float((weight * per_ray).mean())
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    return value, (2.0 / n) * weight[:, None] * resid


def loss(batch: RayBatch, fld: RadianceField, n_samples=64, rng=None, background=0.0) -> float:
    rgb, _, _ = render_rays(fld, batch, n_samples, rng, background, need_grad=False)
    return weighted_loss(rgb, batch.rgb, batch.weight)[0]


def backward(batch: RayBatch, fld: RadianceField, n_samples=64, rng=None, background=0.0, frozen=()):
    """Loss and gradients of every trainable block (frozen blocks get zeros)."""
    rgb, _, pb = render_rays(fld, batch, n_samples, rng, background)
    value, drgb = weighted_loss(rgb, batch.rgb, batch.weight)
    grads = pb(drgb)
    params = fld.parameters()
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            grads[name] = np.zeros_like(p)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in block {name}", block=name)
    return value, grads, rgb


# ----------------------------------------------------------------- adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    t: dict = dc_field(default_factory=dict)

    def reset(self, names):
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.t.pop(n, None)


def step(state: AdamState, params: dict, grads: dict, lrs: dict, skip=()) -> None:
    """One bias-corrected Adam update, in place, with per-block learning rates."""
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name in skip:
            continue
        g = grads[name]
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.t[name] += 1
        t = state.t[name]
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= lrs[name] * mhat / (np.sqrt(vhat) + state.eps)


def block_lr(name: str, cfg: TrainConfig) -> float:
    if ".bank" in name:
        return cfg.lr_kernel
    if name.startswith(("density.", "appearance.")):
        return cfg.lr_grid
    return cfg.lr_decoder


# ------------------------------------------------------------ gradient check


@dataclass
class GradientReport:
    errors: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradient_check(
    fld: RadianceField,
    batch: RayBatch,
    n_samples=8,
    h=1e-5,
    tolerance=1e-4,
    background=0.0,
    frozen=(),
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientReport:
    """Compare analytic gradients with central finite differences per block.

    The error of a block is ``max|g - g_fd| / max(max|g|, max|g_fd|)``.
    Sampling is midpoint-deterministic so both sides see the same samples.
    """
    _, grads, _ = backward(batch, fld, n_samples, None, background, frozen)

    def f():
        fld.touch()
        return loss(batch, fld, n_samples, None, background)

    errors = {}
    for name, p in fld.parameters().items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            # prefer entries the batch actually touches
            g_abs = np.abs(grads[name].reshape(-1))
            touched = np.flatnonzero(g_abs > 0)
            pick = touched if touched.size else idx
            r = rng or np.random.default_rng(0)
            idx = np.sort(r.choice(pick, size=min(max_entries, pick.size), replace=False))
        num = np.zeros(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = f()
            flat[i] = old - h
            lm = f()
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        fld.touch()
        ana = grads[name].reshape(-1)[idx]
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        errors[name] = 0.0 if scale == 0 else float(np.abs(ana - num).max() / scale)
    return GradientReport(errors, tolerance)


# ----------------------------------------------------------------- run


def build_index_maps(cfg: TrainConfig, base_camera) -> tuple:
    """Scale index maps anchored at the training scales of the dataset."""
    if cfg.scales == 1:
        return ()
    if len(cfg.factors) != cfg.scales and not cfg.anchors:
        raise ValueError(f"{len(cfg.factors)} training factors for {cfg.scales} scales; give explicit anchors")
    base = discrete_scale(base_camera)
    if cfg.anchors:
        primary = ScaleIndexMap(tuple(cfg.anchors))
    else:
        primary = default_anchors(base, cfg.factors, cfg.scales)
        if cfg.scale_kind in ("cont", "2d"):
            ref = cfg.reference_distance or float(np.linalg.norm(base_camera.origin))
            primary = ScaleIndexMap(tuple(a * ref for a in primary.anchors))
    if cfg.scale_kind != "2d":
        return (primary,)
    if cfg.secondary_anchors:
        secondary = ScaleIndexMap(tuple(cfg.secondary_anchors))
    else:
        t = np.linspace(base_camera.near, base_camera.far, 257)[1:-1]
        secondary = quantile_anchors(t, cfg.scales)
    return (primary, secondary)


def training_rays(dataset, cfg: TrainConfig) -> RayBatch:
    """All rays of the training split with per-ray loss multipliers."""
    parts = []
    for f in sorted(dataset.train):
        for view in dataset.train[f]:
            cam = view.camera
            if cfg.near > 0 and cfg.far > 0:
                cam = _with_bounds(cam, cfg.near, cfg.far)
            rays = generate_rays(cam)
            rays.rgb = view.image.reshape(-1, 3).astype(np.float64)
            rays.factor = np.full(len(rays), f, dtype=np.float64)
            parts.append(rays)
    rays = RayBatch.concat(parts)
    rays.weight = ray_weights(rays.factor, cfg.loss_weights and tuple(zip(cfg.factors, cfg.loss_weights)))
    return rays


def _with_bounds(cam, near, far):
    from dataclasses import replace

    return replace(cam, near=near, far=far, camera_to_world=cam.camera_to_world.copy())


def psnr_from_mse(mse: float) -> float:
    return float("inf") if mse <= 0 else float(-10.0 * np.log10(mse))


@dataclass
class RunResult:
    field: RadianceField
    config: TrainConfig
    rows: list
    history: dict
    rng_state: dict
    seconds: float
    adam: AdamState


def evaluate_scales(fld, dataset, cfg: TrainConfig, views=None) -> dict:
    """Mean PSNR per test factor over the first ``views`` test views."""
    out = {}
    for f in sorted(dataset.test):
        vals = []
        for view in dataset.test[f][: views or None]:
            cam = view.camera
            if cfg.near > 0 and cfg.far > 0:
                cam = _with_bounds(cam, cfg.near, cfg.far)
            img = render_image(fld, cam, cfg.eval_samples, cfg.background)
            vals.append(psnr_from_mse(float(np.mean((img - view.image) ** 2))))
        out[f] = float(np.mean(vals))
    return out


def run(cfg: TrainConfig, dataset, progress=None) -> RunResult:
    """Train a field on a multi-scale dataset following ``cfg``'s schedule.

    Schedule: grids and decoder from the start, upsampling at the configured
    iterations, kernels unfrozen at ``kernel_start_iteration``. Returns the
    trained field, the metrics rows and per-iteration history.
    """
    rng = np.random.default_rng(cfg.seed)
    base_cam = dataset.train[min(dataset.train)][0].camera
    if cfg.near > 0 and cfg.far > 0:
        base_cam = _with_bounds(base_cam, cfg.near, cfg.far)
    fld = RadianceField.create(cfg.field_config(), rng, build_index_maps(cfg, base_cam))
    if not cfg.learn_kernels:
        for banks in fld.banks.values():
            for b in banks:
                b.trainable = False
    rays = training_rays(dataset, cfg)
    upsample_at = dict(cfg.upsample)
    adam = AdamState()
    rows, hist_loss, hist_psnr = [], [], []
    eval_keys = sorted(dataset.test)
    start = time.perf_counter()
    last_good = None

    def snapshot():
        return {k: v.copy() for k, v in fld.parameters().items()}, fld.config.resolution

    def result():
        return RunResult(
            fld, cfg, rows, {"loss": np.array(hist_loss), "train_psnr": np.array(hist_psnr)},
            rng.bit_generator.state, time.perf_counter() - start, adam,
        )

    for it in range(cfg.iterations):
        if it in upsample_at:
            fld.upsample(upsample_at[it])
            adam.reset([n for n in fld.parameters() if ".bank" not in n and n.startswith(("density.", "appearance."))])
        frozen = set(fld.kernel_names(fixed_only=True))
        if it < cfg.kernel_start_iteration:
            frozen |= set(fld.kernel_names())
        sel = rng.integers(0, len(rays), cfg.batch_rays)
        batch = rays.take(sel)
        try:
            value, grads, pred = backward(batch, fld, cfg.n_samples, rng, cfg.background, frozen)
        except NonFiniteError as exc:
            if last_good is not None:
                params, res = last_good
                if res != fld.config.resolution:
                    fld.config.resolution = res
                fld.load_parameters(params)
            raise TrainingAborted(f"iteration {it}: {exc}", result()) from exc
        if it % cfg.log_every == 0:
            last_good = snapshot()
        decay = cfg.lr_decay ** (it / max(cfg.iterations, 1))
        lrs = {n: block_lr(n, cfg) * decay for n in grads}
        step(adam, fld.parameters(), grads, lrs, skip=frozen)
        fld.touch()
        mse = float(np.mean((pred - batch.rgb) ** 2))
        hist_loss.append(value)
        hist_psnr.append(psnr_from_mse(mse))
        last = it == cfg.iterations - 1
        if it % cfg.log_every == 0 or last:
            row = {"iteration": it, "loss": value, "train_psnr": hist_psnr[-1]}
            do_eval = cfg.eval_every and (it % cfg.eval_every == 0 or last)
            scores = evaluate_scales(fld, dataset, cfg, cfg.eval_views) if do_eval else {}
            for f in eval_keys:
                row[f"eval_psnr_x{f}"] = scores.get(f, "")
            row["seconds"] = time.perf_counter() - start
            rows.append(row)
            log.info("it %d loss %.5f psnr %.2f", it, value, hist_psnr[-1])
            if progress:
                progress(row)
    return result()


def metrics_csv(rows: list) -> str:
    """Metrics rows as CSV: iteration, loss, train_psnr, eval_psnr_x{f}..., seconds."""
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt_metric(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt_metric(v):
    if isinstance(v, float):
        return repr(v)
    return v


def window_means(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)
