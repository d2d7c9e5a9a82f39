"""Independent reference implementations used by the tests.

None of these share code with the package: finite differences for gradients,
a window-by-window SSIM loop, and exhaustive pair counting for AUC.
"""

import contextlib

import numpy as np

from intrasplit import autodiff as ad
from intrasplit.autodiff import Tensor


def numeric_grad(fn, arrays, k, h=1e-5, entries=None):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. ``arrays[k]``.

    Only ``entries`` (default: all) are filled in; the rest stay zero.
    """
    base = [a.copy() for a in arrays]
    out = np.zeros_like(base[k])
    for idx in entries if entries is not None else np.ndindex(base[k].shape):
        old = base[k][idx]
        base[k][idx] = old + h
        up = fn(*base)
        base[k][idx] = old - h
        down = fn(*base)
        base[k][idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(op, arrays, rng, h=1e-5):
    """Max relative error between backward() and finite differences for ``op``.

    The tensor output is contracted with a fixed random weight so every output
    element contributes to the scalar being differentiated.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    weight = rng.standard_normal(out.shape)
    ad.sum(ad.mul(out, Tensor(weight))).backward()

    def scalar(*xs):
        with ad.no_grad():
            return float(np.sum(op(*[Tensor(x) for x in xs]).data * weight))

    worst = 0.0
    for k, leaf in enumerate(leaves):
        worst = max(worst, relative_error(leaf.grad, numeric_grad(scalar, arrays, k, h)))
    return worst


def ssim_naive(x, y, window=7, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Mean SSIM over fully contained windows, one window at a time (2-D or HWC)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    h, w, channels = x.shape
    per_channel = []
    for c in range(channels):
        vals = []
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                a = x[i : i + window, j : j + window, c]
                b = y[i : i + window, j : j + window, c]
                ma, mb = a.mean(), b.mean()
                va = ((a - ma) ** 2).mean()
                vb = ((b - mb) ** 2).mean()
                cov = ((a - ma) * (b - mb)).mean()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def auc_pairs(scores_normal, scores_abnormal):
    """P(abnormal > normal) + 0.5 P(tie), counted over every pair exactly."""
    wins = 0.0
    for a in scores_abnormal:
        for n in scores_normal:
            if a > n:
                wins += 1.0
            elif a == n:
                wins += 0.5
    return wins / (len(scores_normal) * len(scores_abnormal))


def _away_from_zero(rng, shape, gap=0.1):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(gap, 2.0, shape)


def _distinct(rng, shape):
    # spaced values so a finite-difference nudge never changes an argmax
    return rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01)


def primitive_cases():
    """Name -> builder(rng) returning ``(op, arrays)`` for every differentiable primitive."""

    def conv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((2, 5, 5, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        return (lambda a, b: ad.conv2d(a, b, stride, pad)), [x, w]

    def tconv(rng):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        output_pad = int(rng.integers(0, stride))
        x = rng.standard_normal((2, 3, 3, 2))
        w = rng.standard_normal((3, 3, 3, 2))
        return (lambda a, b: ad.conv_transpose2d(a, b, stride, pad, output_pad)), [x, w]

    return {
        "add": lambda r: (ad.add, [r.standard_normal((3, 4)), r.standard_normal(4)]),
        "sub": lambda r: (ad.sub, [r.standard_normal((3, 1)), r.standard_normal((3, 4))]),
        "mul": lambda r: (ad.mul, [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "neg": lambda r: (ad.neg, [r.standard_normal((2, 3))]),
        "relu": lambda r: (ad.relu, [_away_from_zero(r, (3, 4))]),
        "sigmoid": lambda r: (ad.sigmoid, [3 * r.standard_normal((3, 4))]),
        "log": lambda r: (ad.log, [r.uniform(0.5, 2.0, (3, 4))]),
        "square": lambda r: (ad.square, [r.standard_normal((3, 4))]),
        "clip": lambda r: ((lambda a: ad.clip(a, -0.5, 0.5)),
                           [np.where(r.random((3, 4)) < 0.5, r.uniform(-0.45, 0.45, (3, 4)),
                                     _away_from_zero(r, (3, 4), 0.55))]),
        "sum": lambda r: ((lambda a: ad.sum(a, axis=1)), [r.standard_normal((3, 4))]),
        "mean": lambda r: ((lambda a: ad.mean(a, axis=0, keepdims=True)), [r.standard_normal((3, 4))]),
        "reshape": lambda r: ((lambda a: ad.reshape(a, (4, 3))), [r.standard_normal((3, 4))]),
        "concat": lambda r: ((lambda a, b: ad.concat([a, b], axis=1)),
                             [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
        "take": lambda r: ((lambda a: ad.take(a, np.array([2, 0, 2, 1]))), [r.standard_normal((3, 2))]),
        "matmul": lambda r: (ad.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "conv2d": conv,
        "conv_transpose2d": tconv,
        "max_pool2d": lambda r: ((lambda a: ad.max_pool2d(a, 2)), [_distinct(r, (2, 4, 4, 2))]),
    }


@contextlib.contextmanager
def relu_margin():
    """Track the smallest |input| seen by any ReLU while the context is open."""
    seen = [np.inf]
    original = ad.relu

    def relu(a):
        seen[0] = min(seen[0], float(np.abs(a.data).min()))
        return original(a)

    ad.relu = relu
    try:
        yield seen
    finally:
        ad.relu = original


def model_loss_gradcheck(kind, seed, h=1e-5, per_tensor=5):
    """Max relative error of d(loss)/d(params) for one loss through a tiny float64 model.

    Latent size 4, batch 4. Biases are randomized so no pre-activation sits
    exactly on a ReLU kink; ``per_tensor`` random entries of every parameter
    tensor are checked.
    """
    from intrasplit.model import OneClassModel, closeness_loss, dispersion_loss, intra_class_loss

    rng = np.random.default_rng(seed)
    model = OneClassModel((8, 8, 1), latent_dim=4, channels=(2, 2, 2), seed=seed, dtype=np.float64)
    tensors = model.tensors
    i = rng.permutation(4)
    j = np.roll(i, -int(rng.integers(1, 4)))
    y = np.array([0.0, 0.0, 1.0, 1.0])
    # redraw the evaluation point until no ReLU input lies within 1e-3 of its kink
    for _ in range(100):
        x = Tensor(rng.random((4, 8, 8, 1)))
        for t in tensors:
            if t.data.ndim == 1:
                t.data = rng.normal(0.0, 0.1, t.shape)
        with relu_margin() as margin:
            with ad.no_grad():
                model.predict(x)
        if margin[0] > 1e-3:
            break

    def loss():
        if kind == "intra_class":
            return intra_class_loss(y, model.predict(x))
        z = model.latent(x)
        d = model.distance(ad.take(z, i), ad.take(z, j))
        return closeness_loss(d) if kind == "closeness" else dispersion_loss(d)

    for t in tensors:
        t.grad = None
    loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
    values = [t.data.copy() for t in tensors]

    def scalar(*arrays):
        for t, a in zip(tensors, arrays):
            t.data = a
        with ad.no_grad():
            out = loss().item()
        return out

    checked_a, checked_n = [], []
    for k, t in enumerate(tensors):
        flat = rng.choice(t.size, min(per_tensor, t.size), replace=False)
        entries = [np.unravel_index(f, t.shape) for f in flat]
        numeric = numeric_grad(scalar, values, k, h, entries)
        checked_a.extend(analytic[k][e] for e in entries)
        checked_n.extend(numeric[e] for e in entries)
    # error relative to the whole gradient vector: tensors the loss does not
    # reach have an exact zero gradient and would otherwise compare round-off
    worst = relative_error(np.array(checked_a), np.array(checked_n))
    for t, a in zip(tensors, values):
        t.data = a
    return worst, analytic
