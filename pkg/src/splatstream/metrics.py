"""Image-quality and bandwidth metrics shared by tests, replay, and plots."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_IDENTICAL = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    out = convolve2d(img, k1d[:, None], mode="valid")
    return convolve2d(out, k1d[None, :], mode="valid")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with the standard 11x11 sigma-1.5 Gaussian
    window, averaged over channels and the valid (unpadded) region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("images smaller than the SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    k = _gaussian_kernel_1d()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx = _filter_valid(x, k)
        my = _filter_valid(y, k)
        mxx = _filter_valid(x * x, k)
        myy = _filter_valid(y * y, k)
        mxy = _filter_valid(x * y, k)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images return inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(data_range**2 / mse)


@dataclass
class BandwidthReport:
    total_bytes: int
    mean_bps: float
    median_bps: float
    peak_bps: float
    per_tick_bytes: np.ndarray  # (ticks,)
    per_type_bytes: dict = field(default_factory=dict)  # type -> (ticks,) bytes

    @property
    def peak_to_median(self) -> float:
        if self.median_bps == 0:
            return float("inf") if self.peak_bps > 0 else 0.0
        return self.peak_bps / self.median_bps


def bandwidth_report(packet_log, tick_rate_hz: float = 30.0,
                     window_seconds: float = 1.0) -> BandwidthReport:
    """Summarize a log of (tick, packet_type, byte_count) entries.

    Rates are bits per second over sliding windows of `window_seconds`
    aligned to ticks; the per-tick series is kept for stacked plots.
    """
    entries = list(packet_log)
    if not entries:
        z = np.zeros(0)
        return BandwidthReport(0, 0.0, 0.0, 0.0, z, {})
    ticks = np.array([e[0] for e in entries], dtype=np.int64)
    sizes = np.array([e[2] for e in entries], dtype=np.int64)
    n_ticks = int(ticks.max()) + 1
    per_tick = np.zeros(n_ticks, dtype=np.int64)
    np.add.at(per_tick, ticks, sizes)
    per_type: dict = {}
    for t, ptype, size in entries:
        series = per_type.setdefault(ptype, np.zeros(n_ticks, dtype=np.int64))
        series[t] += size
    window = max(1, int(round(window_seconds * tick_rate_hz)))
    if n_ticks >= window:
        csum = np.concatenate([[0], np.cumsum(per_tick)])
        win_bytes = csum[window:] - csum[:-window]
    else:
        win_bytes = np.array([per_tick.sum()])
    win_bps = win_bytes * 8.0 / window_seconds
    return BandwidthReport(
        total_bytes=int(sizes.sum()),
        mean_bps=float(win_bps.mean()),
        median_bps=float(np.median(win_bps)),
        peak_bps=float(win_bps.max()),
        per_tick_bytes=per_tick,
        per_type_bytes=per_type,
    )


@dataclass
class QualityReport:
    """Per-view quality numbers plus aggregates, used by the replay harness."""

    ssim_per_view: np.ndarray
    psnr_per_view: np.ndarray

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_per_view))

    @property
    def median_ssim(self) -> float:
        return float(np.median(self.ssim_per_view))

    @property
    def quartiles_ssim(self) -> tuple[float, float]:
        return (
            float(np.percentile(self.ssim_per_view, 25)),
            float(np.percentile(self.ssim_per_view, 75)),
        )

    @property
    def mean_psnr(self) -> float:
        finite = self.psnr_per_view[np.isfinite(self.psnr_per_view)]
        return float(finite.mean()) if finite.size else PSNR_IDENTICAL


def quality_report(rendered, references) -> QualityReport:
    s = np.array([ssim(r, g) for r, g in zip(rendered, references)])
    p = np.array([psnr(r, g) for r, g in zip(rendered, references)])
    return QualityReport(ssim_per_view=s, psnr_per_view=p)
