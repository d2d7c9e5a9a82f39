"""
One-class classifier trained on a typical/atypical split of the normal class.

The backbone maps an image to a latent vector z and a prediction y_hat in
(0, 1); label 0 is typical, 1 atypical, so y_hat is an abnormality score. A
distance subnetwork D(z_i, z_j) = sigmoid(w . (z_i - z_j) + b) is used only
during training.

Each training iteration takes three optimizer steps in order:

1. closeness:  -mean log(1 - D)  on pairs of typical samples
2. intra-class: binary cross-entropy on a half typical / half atypical batch
3. dispersion: -mean log(D)      on pairs of atypical samples
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, DataError
from .nn import LayerSpec, Network, build_backbone, init_params, read_checkpoint, write_checkpoint
from .optim import AdamState, adam_step
from .splitting import SplitResult

log = logging.getLogger(__name__)

LOG_EPS = 1e-7
ABLATIONS = ("naive_nn", "nn_with_ics")


class OneClassModel:
    def __init__(self, input_shape, latent_dim: int = 64, channels=(16, 32, 64), seed: int = 0,
                 dtype=np.float32):
        self.backbone = build_backbone(input_shape, latent_dim, channels, dtype=dtype)
        self.distance_net = Network("distance", (latent_dim,),
                                    [LayerSpec("dense", 1, init="glorot-uniform"), LayerSpec("sigmoid")],
                                    dtype=dtype)
        init_params(self.backbone, seed)
        init_params(self.distance_net, seed + 7919)

    @property
    def params(self):
        return self.backbone.params + self.distance_net.params

    @property
    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params]

    def l2_decays(self, decay: float) -> list[float]:
        return self.backbone.l2_decays(decay) + self.distance_net.l2_decays(decay)

    def latent(self, x: Tensor) -> Tensor:
        return self.backbone.forward(x, stop=self.backbone.latent_layer)

    def head(self, z: Tensor) -> Tensor:
        return self.backbone.forward(z, start=self.backbone.latent_layer)

    def predict(self, x: Tensor) -> Tensor:
        return self.head(self.latent(x))

    def distance(self, z_i: Tensor, z_j: Tensor) -> Tensor:
        return self.distance_net(ad.sub(z_i, z_j))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.backbone.state_dict(), **self.distance_net.state_dict()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.backbone.load_state_dict(state)
        self.distance_net.load_state_dict(state)

    def score(self, images: np.ndarray, chunk: int = 500) -> np.ndarray:
        """Abnormality score y_hat per image (higher = more abnormal)."""
        images = np.asarray(images, dtype=self.backbone.dtype)
        out = []
        with ad.no_grad():
            for start in range(0, len(images), chunk):
                out.append(self.predict(Tensor(images[start : start + chunk])).data[:, 0])
        return np.concatenate(out).astype(np.float64) if out else np.empty(0)


# ---------------------------------------------------------------- losses


def pair_indices(batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pair every batch position with another one via a circular shift of a shuffle.

    Returns index arrays ``(i, j)`` of length ``batch`` with ``i[k] != j[k]``.
    """
    if batch < 2:
        raise ContractError(f"pairing needs at least 2 samples, got {batch}")
    order = rng.permutation(batch)
    shift = int(rng.integers(1, batch))
    return order, np.roll(order, -shift)


def pair_batch(batch_z: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    i, j = pair_indices(batch_z.shape[0], rng)
    return ad.take(batch_z, i), ad.take(batch_z, j)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def closeness_loss(d) -> Tensor:
    """-mean log(1 - D) over typical pairs; D is clamped to [eps, 1 - eps]."""
    d = ad.clip(_as_tensor(d), LOG_EPS, 1 - LOG_EPS)
    return ad.neg(ad.mean(ad.log(ad.sub(1.0, d))))


def dispersion_loss(d) -> Tensor:
    """-mean log(D) over atypical pairs; D is clamped to [eps, 1 - eps]."""
    d = ad.clip(_as_tensor(d), LOG_EPS, 1 - LOG_EPS)
    return ad.neg(ad.mean(ad.log(d)))


def intra_class_loss(y, y_hat) -> Tensor:
    """Binary cross-entropy, typical = 0 and atypical = 1."""
    y_hat = ad.clip(_as_tensor(y_hat), LOG_EPS, 1 - LOG_EPS)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=y_hat.dtype).reshape(y_hat.shape)
    pos = ad.mul(y, ad.log(y_hat))
    neg = ad.mul(1.0 - y, ad.log(ad.sub(1.0, y_hat)))
    return ad.neg(ad.mean(ad.add(pos, neg)))


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    iteration: int = 0
    optimizer: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng=np.random.default_rng([seed, 2]))


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    return pool[rng.choice(len(pool), k, replace=len(pool) < k)]


class Trainer:
    """Runs the stepwise schedule; ``mode`` selects the full method or an ablation."""

    def __init__(self, model: OneClassModel, images: np.ndarray, config: ExperimentConfig,
                 split: SplitResult | None, mode: str = "ours", state: TrainState | None = None,
                 seed: int = 0):
        if mode not in ("ours",) + ABLATIONS:
            raise ConfigError(f"unknown training mode {mode!r}")
        self.model = model
        self.images = np.asarray(images, dtype=model.backbone.dtype)
        self.config = config
        self.mode = mode
        self.state = state or TrainState.fresh(seed)
        self.decays = model.l2_decays(config.l2_decay)
        if mode == "naive_nn":
            self.typical = np.arange(len(self.images))
            self.atypical = np.empty(0, np.int64)
        else:
            if split is None:
                raise ConfigError(f"mode {mode!r} needs a split")
            if split.n != len(self.images):
                raise DataError(f"split covers {split.n} samples but {len(self.images)} images were given")
            self.typical, self.atypical = split.typical_idx, split.atypical_idx
            if len(self.typical) == 0 or len(self.atypical) == 0:
                raise ConfigError("both the typical and the atypical subset must be non-empty")
        self.batch = config.batch

    def _step(self, loss: Tensor) -> float:
        params = self.model.tensors
        for p in params:
            p.grad = None
        loss.backward()
        adam_step(params, [p.grad for p in params], self.state.optimizer, self.config.lr, self.decays)
        return loss.item()

    def _x(self, idx: np.ndarray) -> Tensor:
        return Tensor(self.images[idx])

    def closeness_step(self) -> float:
        rng = self.state.rng
        z = self.model.latent(self._x(_draw(rng, self.typical, self.batch)))
        zi, zj = pair_batch(z, rng)
        return self._step(closeness_loss(self.model.distance(zi, zj)))

    def intra_class_step(self) -> float:
        rng = self.state.rng
        if self.mode == "naive_nn":
            idx = _draw(rng, self.typical, self.batch)
            y = np.zeros((self.batch, 1))
        else:
            half = self.batch // 2
            idx = np.concatenate([_draw(rng, self.typical, self.batch - half),
                                  self.atypical[rng.choice(len(self.atypical), half, replace=True)]])
            y = np.concatenate([np.zeros(self.batch - half), np.ones(half)])[:, None]
        return self._step(intra_class_loss(y, self.model.predict(self._x(idx))))

    def dispersion_step(self) -> float:
        rng = self.state.rng
        z = self.model.latent(self._x(_draw(rng, self.atypical, self.batch)))
        zi, zj = pair_batch(z, rng)
        return self._step(dispersion_loss(self.model.distance(zi, zj)))

    def run(self, until: int | None = None) -> OneClassModel:
        """Train up to iteration ``until`` (default: ``config.iterations``)."""
        until = self.config.iterations if until is None else min(until, self.config.iterations)
        while self.state.iteration < until:
            if self.mode == "ours":
                losses = (self.closeness_step(), self.intra_class_step(), self.dispersion_step())
            else:
                losses = (self.intra_class_step(),)
            self.state.iteration += 1
            if self.state.iteration % 500 == 0:
                log.debug("%s iteration %d losses %s", self.mode, self.state.iteration,
                          " ".join(f"{v:.4f}" for v in losses))
        return self.model


def train(model: OneClassModel, split: SplitResult, images: np.ndarray, config: ExperimentConfig,
          seed: int = 0) -> OneClassModel:
    return Trainer(model, images, config, split, "ours", seed=seed).run()


def train_ablation(mode: str, model: OneClassModel, split: SplitResult | None, images: np.ndarray,
                   config: ExperimentConfig, seed: int = 0) -> OneClassModel:
    if mode not in ABLATIONS:
        raise ConfigError(f"ablation mode must be one of {ABLATIONS}, got {mode!r}")
    return Trainer(model, images, config, split, mode, seed=seed).run()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: OneClassModel, state: TrainState,
                    config: ExperimentConfig | None = None, extra: dict[str, Any] | None = None) -> None:
    """Write ``<path>`` (ICSP parameters + Adam moments) and ``<path>.json`` (iteration, RNG, config)."""
    path = Path(path)
    arrays = model.state_dict()
    names = [p.name for p in model.params]
    opt = state.optimizer
    if opt.m:
        for name, m, v in zip(names, opt.m, opt.v):
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = v
    write_checkpoint(path, arrays)
    sidecar = {
        "iteration": state.iteration,
        "adam_step": opt.step,
        "adam_counts": list(opt.t),
        "rng": state.rng.bit_generator.state,
        "config": config.to_dict() if config is not None else None,
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, model: OneClassModel) -> tuple[TrainState, dict[str, Any]]:
    path = Path(path)
    arrays = read_checkpoint(path)
    try:
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint sidecar for {path}: {exc}") from None
    model.load_state_dict(arrays)
    names = [p.name for p in model.params]
    opt = AdamState(step=int(sidecar["adam_step"]), t=[int(c) for c in sidecar.get("adam_counts", [])])
    if f"adam.m.{names[0]}" in arrays:
        dtype = model.backbone.dtype
        opt.m = [arrays[f"adam.m.{n}"].astype(dtype) for n in names]
        opt.v = [arrays[f"adam.v.{n}"].astype(dtype) for n in names]
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng"]
    return TrainState(int(sidecar["iteration"]), opt, rng), sidecar
