"""SSIM similarity, ROC-AUC and MSE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class AucResult:
    auc: float
    n_normal: int
    n_abnormal: int

    def __float__(self) -> float:
        return self.auc


def _box_means(img: np.ndarray, window: int) -> np.ndarray:
    """Means over all fully-contained ``window x window`` boxes of an ``[n, h, w, c]`` stack.

    Separable sums over short windows; no running totals, so no cancellation.
    """
    rows = sliding_window_view(img, window, axis=1).sum(axis=-1)
    return sliding_window_view(rows, window, axis=2).sum(axis=-1) / (window * window)


def _as_hwc(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 2 else x


def ssim_batch(x: np.ndarray, y: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
               dynamic_range: float = 1.0) -> np.ndarray:
    """Per-image SSIM for stacks ``[n, h, w, c]`` (or ``[n, h, w]``)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x[..., None], y[..., None]
    if x.ndim != 4:
        raise ShapeError(f"ssim_batch: expected [n, h, w(, c)] stacks, got {x.shape}")
    if window < 1 or window % 2 == 0:
        raise ContractError(f"ssim: window must be a positive odd integer, got {window}")
    if window > min(x.shape[1:3]):
        raise ShapeError(f"ssim: window {window} larger than image {x.shape[1:3]}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mx = _box_means(x, window)
    my = _box_means(y, window)
    vx = _box_means(x * x, window) - mx * mx
    vy = _box_means(y * y, window) - my * my
    cxy = _box_means(x * y, window) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    # mean over windows per channel, then over channels
    return smap.mean(axis=(1, 2)).mean(axis=-1)


def ssim(x: np.ndarray, y: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> float:
    """Mean SSIM over every fully-contained uniform ``window x window`` patch.

    Statistics are population (1/N) moments. Multi-channel images average the
    per-channel scores.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"ssim: expected an (h, w) or (h, w, c) image, got {x.shape}")
    return float(ssim_batch(_as_hwc(x)[None], _as_hwc(y)[None], window, k1, k2, dynamic_range)[0])


def auc(scores_normal: Sequence[float], scores_abnormal: Sequence[float]) -> AucResult:
    """ROC-AUC of abnormality scores (higher = more abnormal) via the rank-sum statistic.

    Equals P(abnormal > normal) + 0.5 * P(abnormal == normal).
    """
    sn = np.asarray(scores_normal, dtype=np.float64).ravel()
    sa = np.asarray(scores_abnormal, dtype=np.float64).ravel()
    if sn.size == 0 or sa.size == 0:
        raise ContractError("auc: both score lists must be non-empty")
    if not (np.all(np.isfinite(sn)) and np.all(np.isfinite(sa))):
        raise ContractError("auc: scores must be finite")
    ranks = rankdata(np.concatenate([sn, sa]), method="average")
    u = ranks[sn.size:].sum() - sa.size * (sa.size + 1) / 2.0
    return AucResult(float(u / (sn.size * sa.size)), int(sn.size), int(sa.size))


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"mse: shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))
