"""Adam with per-parameter L2 decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


@dataclass
class AdamState:
    step: int = 0  # number of adam_step calls
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: list[int] = field(default_factory=list)  # per-parameter update counts for bias correction


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    l2_decay_per_param: Sequence[float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    ``l2_decay_per_param[k] * w`` is added to the k-th gradient before the
    moment update (the derivative of ``decay / 2 * ||w||^2``). A ``None``
    gradient marks a parameter the loss does not reach: it is skipped and its
    moments are left untouched.
    """
    if not (len(params) == len(grads) == len(l2_decay_per_param)):
        raise ContractError(
            f"adam_step: misaligned lists ({len(params)} params, {len(grads)} grads, "
            f"{len(l2_decay_per_param)} decays)"
        )
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        state.t = [0] * len(params)
    elif len(state.m) != len(params):
        raise ContractError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")

    state.step += 1
    for k, (p, g, decay, m, v) in enumerate(zip(params, grads, l2_decay_per_param, state.m, state.v)):
        if g is None:
            continue
        state.t[k] += 1
        c1 = 1 - beta1 ** state.t[k]
        c2 = 1 - beta2 ** state.t[k]
        if decay:
            g = g + decay * p.data
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper that reads ``.grad`` from each parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, l2_decay: Sequence[float] | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.l2_decay = list(l2_decay) if l2_decay is not None else [0.0] * len(self.params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.l2_decay,
                  self.beta1, self.beta2, self.eps)
