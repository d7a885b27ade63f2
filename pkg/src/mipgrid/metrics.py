"""Image quality metrics and per-scale evaluation reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field as dc_field

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` on ``[0, 1]`` images, capped at :data:`PSNR_CAP`."""
    err = mse(a, b)
    if err <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(err)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), data range 1.

    Colour images are averaged over channels. Images smaller than the window
    fall back to the largest odd window that fits.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    side = min(a.shape[:2])
    if side >= 11:
        opts = dict(gaussian_weights=True, sigma=SSIM_SIGMA)
    else:
        # tiny images (e.g. 8x8 at the 1/8 scale): uniform window that fits
        opts = dict(win_size=side if side % 2 else side - 1)
    return float(
        structural_similarity(
            a, b, data_range=1.0, channel_axis=2 if a.ndim == 3 else None,
            use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2, **opts,
        )
    )


@dataclass
class EvalRow:
    factor: float
    view: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    """Per-image rows with per-scale and overall averages."""

    rows: list = dc_field(default_factory=list)
    seconds: float = 0.0

    def add(self, factor, view, pred, target) -> EvalRow:
        row = EvalRow(float(factor), str(view), psnr(pred, target), ssim(pred, target))
        self.rows.append(row)
        return row

    @property
    def factors(self) -> list:
        return sorted({r.factor for r in self.rows})

    def mean(self, metric: str, factor=None) -> float:
        vals = [getattr(r, metric) for r in self.rows if factor is None or r.factor == factor]
        return float(np.mean(vals)) if vals else float("nan")

    def per_scale(self, metric: str) -> dict:
        return {f: self.mean(metric, f) for f in self.factors}

    def average(self, metric: str) -> float:
        """Average over scales (each scale weighted equally)."""
        scales = self.per_scale(metric)
        return float(np.mean(list(scales.values()))) if scales else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["factor", "view", "psnr", "ssim"])
        for r in self.rows:
            w.writerow([_fmt_factor(r.factor), r.view, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        """Pretty table: one column per scale plus the average; LPIPS is not computed."""
        cols = ["Avg."] + [_scale_label(f) for f in self.factors]
        lines = ["metric  " + "  ".join(f"{c:>9}" for c in cols)]
        for metric, name in (("psnr", "PSNR"), ("ssim", "SSIM")):
            vals = [self.average(metric)] + [self.mean(metric, f) for f in self.factors]
            fmt = "{:9.2f}" if metric == "psnr" else "{:9.4f}"
            lines.append(f"{name:<6}  " + "  ".join(fmt.format(v) for v in vals))
        lines.append(f"{'LPIPS':<6}  " + "  ".join(f"{'n/a':>9}" for _ in cols))
        return "\n".join(lines)


def _fmt_factor(f: float) -> str:
    return str(int(f)) if float(f).is_integer() else f"{f:g}"


def _scale_label(f: float) -> str:
    if f == 1:
        return "Full Res."
    inv = 1.0 / f
    return f"1/{_fmt_factor(f)} Res." if float(f).is_integer() else f"{inv:g} Res."
