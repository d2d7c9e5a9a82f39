"""
Intra-class splitting.

An autoencoder is fitted to the normal training images; each image is scored
by the SSIM between it and its reconstruction, and the lowest-scoring
``rho`` percent become the atypical subset.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .errors import ConfigError, DataError
from .metrics import ssim_batch
from .nn import Network, build_autoencoder, init_params
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class SplitResult:
    scores: np.ndarray  # SSIM per sample, dataset order
    atypical_idx: np.ndarray  # sorted ascending
    typical_idx: np.ndarray  # sorted ascending
    rho: float

    @property
    def n(self) -> int:
        return len(self.scores)

    def subset_labels(self) -> np.ndarray:
        """0 for typical, 1 for atypical, aligned with the dataset."""
        labels = np.zeros(self.n, dtype=np.int64)
        labels[self.atypical_idx] = 1
        return labels

    def to_csv(self, path: str | Path) -> None:
        labels = self.subset_labels()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "ssim_score", "subset"])
            for i, (s, lab) in enumerate(zip(self.scores, labels)):
                writer.writerow([i, repr(float(s)), "atypical" if lab else "typical"])

    @classmethod
    def from_csv(cls, path: str | Path, rho: float) -> "SplitResult":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"split file {path} has no rows")
        order = np.array([int(r["index"]) for r in rows])
        if not np.array_equal(np.sort(order), np.arange(len(rows))):
            raise DataError(f"split file {path}: indices are not a permutation of 0..{len(rows) - 1}")
        scores = np.empty(len(rows))
        atyp = np.zeros(len(rows), bool)
        for i, r in zip(order, rows):
            scores[i] = float(r["ssim_score"])
            if r["subset"] not in ("typical", "atypical"):
                raise DataError(f"split file {path}: unknown subset {r['subset']!r}")
            atyp[i] = r["subset"] == "atypical"
        return cls(scores, np.flatnonzero(atyp), np.flatnonzero(~atyp), rho)


def atypical_count(n: int, rho: float) -> int:
    """floor(rho * n / 100), robust to binary round-off in rho."""
    return math.floor(round(rho * n, 9) / 100)


def train_split_autoencoder(images: np.ndarray, config: ExperimentConfig, seed: int) -> Network:
    """Fit the splitting autoencoder on normal images by minimizing MSE."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise DataError("cannot train the splitting autoencoder on an empty dataset")
    if images.min() < 0 or images.max() > 1:
        raise DataError("images must lie in [0, 1]")
    ae = init_params(build_autoencoder(images.shape[1:], config.code_dim, config.ae_channels), seed)
    opt = Adam(ae.tensors, lr=config.ae_lr, l2_decay=ae.l2_decays(config.l2_decay))
    rng = np.random.default_rng([seed, 1])
    batch = min(config.batch, len(images))
    for it in range(config.ae_iterations):
        x = Tensor(images[rng.choice(len(images), batch, replace=False)])
        loss = ad.mean(ad.square(ad.sub(ae(x), x)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % 500 == 0:
            log.debug("autoencoder iteration %d mse %.5f", it, loss.item())
    return ae


def reconstruct(ae: Network, images: np.ndarray, chunk: int = 500) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    out = []
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            out.append(ae(Tensor(images[start : start + chunk])).data)
    return np.concatenate(out) if out else np.empty_like(images)


def similarity_scores(ae: Network, images: np.ndarray, window: int = 7) -> np.ndarray:
    """SSIM(x, x_hat) for every image."""
    images = np.asarray(images, dtype=np.float32)
    return ssim_batch(images, reconstruct(ae, images), window=window)


def split_scores(scores: np.ndarray, rho: float) -> SplitResult:
    """Mark the ``floor(rho * n / 100)`` lowest-scoring samples atypical.

    Ties go to the lower dataset index first, so the atypical set only grows
    as ``rho`` grows.
    """
    if not 0 < rho < 100:
        raise ConfigError(f"rho must lie strictly between 0 and 100, got {rho}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    k = atypical_count(n, rho)
    if k == 0:
        raise ConfigError(f"rho={rho} of n={n} samples yields an empty atypical subset")
    if k == n:
        raise ConfigError(f"rho={rho} of n={n} samples yields an empty typical subset")
    order = np.argsort(scores, kind="stable")
    return SplitResult(scores, np.sort(order[:k]), np.sort(order[k:]), float(rho))


def split(images: np.ndarray, ae: Network, rho: float, window: int = 7) -> SplitResult:
    if not 0 < rho < 100:
        raise ConfigError(f"rho must lie strictly between 0 and 100, got {rho}")
    return split_scores(similarity_scores(ae, images, window), rho)


def recon_error_score(ae: Network, images: np.ndarray, window: int = 7) -> np.ndarray:
    """Reconstruction-error baseline: abnormality = 1 - SSIM(x, x_hat)."""
    return 1.0 - similarity_scores(ae, images, window)
