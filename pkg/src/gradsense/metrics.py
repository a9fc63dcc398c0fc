"""Reconstruction quality: MSE/RMSE/PSNR/SSIM, batch matching and RecR."""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment

__all__ = ["MetricSet", "BatchMetrics", "match_batch", "score_pair", "batch_report", "ssim", "PSNR_CAP"]

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class MetricSet:
    mse: float
    rmse: float
    psnr: float
    ssim: float


@dataclass(frozen=True)
class BatchMetrics:
    rmse_mean: float
    rmse_std: float
    mse_mean: float
    mse_std: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    recr: float
    matching: tuple
    pairs: tuple

    def as_row(self):
        return {
            "rmse_mean": self.rmse_mean, "rmse_std": self.rmse_std,
            "psnr_mean": self.psnr_mean, "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean, "ssim_std": self.ssim_std,
            "recr": self.recr,
        }


def _as_images(batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[:, None]
    return batch


def match_batch(recon_images, truth_images):
    """Permutation ``p`` minimising total MSE: recon[p[i]] is paired with truth[i]."""
    recon, truth = _as_images(recon_images), _as_images(truth_images)
    if recon.shape != truth.shape:
        raise ValueError(f"batch shape mismatch: {recon.shape} vs {truth.shape}")
    r = np.clip(recon, 0, 1).reshape(len(recon), -1)
    t = np.clip(truth, 0, 1).reshape(len(truth), -1)
    cost = ((t[:, None, :] - r[None, :, :]) ** 2).mean(axis=2)
    _, cols = linear_sum_assignment(cost)
    return tuple(int(c) for c in cols)


def _ssim_channel(x, y):
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        xs, ys = x[None, None], y[None, None]
    else:
        xs = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        ys = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx = xs.mean(axis=(-2, -1))
    my = ys.mean(axis=(-2, -1))
    vx = xs.var(axis=(-2, -1))
    vy = ys.var(axis=(-2, -1))
    cov = ((xs - mx[..., None, None]) * (ys - my[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return (num / den).mean()


def ssim(a, b):
    """Mean SSIM over 8x8 uniform windows (stride 1) and channels, unit range."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(np.mean([_ssim_channel(x, y) for x, y in zip(a, b)]))


def score_pair(recon, truth):
    recon, truth = np.asarray(recon, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    recon, truth = np.clip(recon, 0.0, 1.0), np.clip(truth, 0.0, 1.0)
    mse = float(np.mean((recon - truth) ** 2))
    psnr = PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
    return MetricSet(mse, float(np.sqrt(mse)), float(psnr), ssim(recon, truth))


def batch_report(recon_batch, truth_batch, psnr_threshold=19.0):
    """Match, score and aggregate (mean and population std) a reconstructed batch."""
    recon, truth = _as_images(recon_batch), _as_images(truth_batch)
    perm = match_batch(recon, truth)
    pairs = tuple(score_pair(recon[perm[i]], truth[i]) for i in range(len(truth)))
    arr = {k: np.array([getattr(p, k) for p in pairs]) for k in ("mse", "rmse", "psnr", "ssim")}
    return BatchMetrics(
        rmse_mean=float(arr["rmse"].mean()), rmse_std=float(arr["rmse"].std()),
        mse_mean=float(arr["mse"].mean()), mse_std=float(arr["mse"].std()),
        psnr_mean=float(arr["psnr"].mean()), psnr_std=float(arr["psnr"].std()),
        ssim_mean=float(arr["ssim"].mean()), ssim_std=float(arr["ssim"].std()),
        recr=float(np.mean(arr["psnr"] > psnr_threshold)),
        matching=perm,
        pairs=pairs,
    )
