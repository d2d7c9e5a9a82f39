"""
Layer specs, sequential networks and the two concrete architectures.

A :class:`Network` is an ordered list of :class:`LayerSpec` plus the flat
parameter list they own. Shapes are checked statically when the network is
built so a bad configuration fails before any training step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "tconv2d", "maxpool2d", "relu", "sigmoid", "flatten", "unflatten")
INIT_KINDS = ("he-normal", "glorot-uniform")

CHECKPOINT_MAGIC = b"ICSP"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str
    width: int | None = None  # dense units or output channels
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    output_pad: int = 0
    init: str = "glorot-uniform"
    target_shape: tuple[int, ...] | None = None  # unflatten only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.init not in INIT_KINDS:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"{self.kind}: kernel and stride must be >= 1")
        if self.kind in ("dense", "conv2d", "tconv2d") and (self.width is None or self.width < 1):
            raise ConfigError(f"{self.kind}: width must be >= 1")


@dataclass
class Param:
    name: str
    tensor: Tensor
    layer: int
    role: str  # "kernel" or "bias"
    is_conv: bool = False

    @property
    def l2_decay_flag(self) -> bool:
        return self.is_conv and self.role == "kernel"


@dataclass
class Network:
    name: str
    input_shape: tuple[int, ...]  # per-sample, e.g. (h, w, c)
    layers: list[LayerSpec]
    params: list[Param] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)  # output shape after each layer
    dtype: type = np.float32
    latent_layer: int | None = None  # one past the layer emitting the latent/code vector
    _layer_params: dict[int, list[Param]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.shapes = infer_shapes(self.input_shape, self.layers)
        if not self.params:
            self._allocate()
        self._index()

    def _allocate(self) -> None:
        prev = self.input_shape
        for i, (spec, out) in enumerate(zip(self.layers, self.shapes)):
            if spec.kind == "dense":
                kshape = (prev[0], spec.width)
            elif spec.kind == "conv2d":
                kshape = (spec.kernel, spec.kernel, prev[-1], spec.width)
            elif spec.kind == "tconv2d":
                kshape = (spec.kernel, spec.kernel, spec.width, prev[-1])
            else:
                prev = out
                continue
            conv = spec.kind != "dense"
            self.params.append(Param(f"{self.name}.{i}.{spec.kind}.kernel",
                                     Tensor(np.zeros(kshape, self.dtype), requires_grad=True), i, "kernel", conv))
            self.params.append(Param(f"{self.name}.{i}.{spec.kind}.bias",
                                     Tensor(np.zeros((spec.width,), self.dtype), requires_grad=True), i, "bias", conv))
            prev = out

    def _index(self) -> None:
        self._layer_params = {}
        for p in self.params:
            self._layer_params.setdefault(p.layer, []).append(p)

    @property
    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params]

    def l2_decays(self, decay: float) -> list[float]:
        return [decay if p.l2_decay_flag else 0.0 for p in self.params]

    def n_parameters(self) -> int:
        return int(sum(p.tensor.size for p in self.params))

    def forward(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        """Run layers ``start:stop`` on a batch. ``x`` carries a leading batch axis."""
        stop = len(self.layers) if stop is None else stop
        expected = self.input_shape if start == 0 else self.shapes[start - 1]
        if tuple(x.shape[1:]) != tuple(expected):
            raise ShapeError(f"{self.name}: expected per-sample shape {expected}, got {x.shape[1:]}")
        h = x
        for i in range(start, stop):
            h = _apply(self.layers[i], self._layer_params.get(i, ()), h)
        return h

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise DataError(f"checkpoint is missing parameter {p.name}")
            arr = np.asarray(state[p.name])
            if arr.shape != p.tensor.shape:
                raise DataError(f"{p.name}: checkpoint shape {arr.shape} != {p.tensor.shape}")
            p.tensor.data = arr.astype(self.dtype).copy()


def _apply(spec: LayerSpec, params: Sequence[Param], h: Tensor) -> Tensor:
    kind = spec.kind
    if kind == "dense":
        w, b = params
        return ad.add(ad.matmul(h, w.tensor), b.tensor)
    if kind == "conv2d":
        w, b = params
        return ad.add(ad.conv2d(h, w.tensor, spec.stride, spec.pad), b.tensor)
    if kind == "tconv2d":
        w, b = params
        return ad.add(ad.conv_transpose2d(h, w.tensor, spec.stride, spec.pad, spec.output_pad), b.tensor)
    if kind == "maxpool2d":
        return ad.max_pool2d(h, spec.kernel, spec.stride)
    if kind == "relu":
        return ad.relu(h)
    if kind == "sigmoid":
        return ad.sigmoid(h)
    if kind == "flatten":
        return ad.reshape(h, (h.shape[0], -1))
    return ad.reshape(h, (h.shape[0],) + tuple(spec.target_shape))


def infer_shapes(input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> list[tuple[int, ...]]:
    """Per-sample output shape after every layer; raises ConfigError if layers don't compose."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for i, spec in enumerate(layers):
        where = f"layer {i} ({spec.kind}) with input {shape}"
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{where}: dense needs a flat input")
            shape = (spec.width,)
        elif spec.kind in ("conv2d", "tconv2d", "maxpool2d"):
            if len(shape) != 3:
                raise ConfigError(f"{where}: needs an (h, w, c) input")
            h, w, c = shape
            if spec.kind == "tconv2d":
                if not 0 <= spec.output_pad < spec.stride:
                    raise ConfigError(f"{where}: output_pad must lie in [0, stride)")
                size = [ad.conv_transpose_output_size(s, spec.kernel, spec.stride, spec.pad, spec.output_pad)
                        for s in (h, w)]
                c = spec.width
            else:
                pad = spec.pad if spec.kind == "conv2d" else 0
                size = [ad.conv_output_size(s, spec.kernel, spec.stride, pad) for s in (h, w)]
                if spec.kind == "conv2d":
                    c = spec.width
            if min(size) < 1:
                raise ConfigError(f"{where}: spatial size collapses to {tuple(size)}")
            shape = (size[0], size[1], c)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "unflatten":
            target = tuple(spec.target_shape or ())
            if int(np.prod(target)) != int(np.prod(shape)):
                raise ConfigError(f"{where}: cannot unflatten into {target}")
            shape = target
        out.append(shape)
    return out


# ---------------------------------------------------------------- initialization


def init_params(net: Network, seed: int) -> Network:
    """Fill every parameter deterministically from ``seed``.

    Kernels of layers followed by a relu get He-normal init, everything else
    Glorot-uniform; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    for p in net.params:
        spec = net.layers[p.layer]
        t = p.tensor
        if p.role == "bias":
            t.data = np.zeros(t.shape, net.dtype)
            continue
        fan_in, fan_out = _fans(spec, t.shape)
        if spec.init == "he-normal":
            values = rng.standard_normal(t.shape) * np.sqrt(2.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-limit, limit, size=t.shape)
        t.data = values.astype(net.dtype)
        t.grad = None
    return net


def _fans(spec: LayerSpec, kshape: tuple[int, ...]) -> tuple[int, int]:
    if spec.kind == "dense":
        return kshape[0], kshape[1]
    area = kshape[0] * kshape[1]
    if spec.kind == "conv2d":
        return area * kshape[2], area * kshape[3]
    # tconv kernel is [kh, kw, cout, cin]
    return area * kshape[3], area * kshape[2]


def _with_inits(layers: list[LayerSpec]) -> list[LayerSpec]:
    for i, spec in enumerate(layers):
        if spec.kind in ("dense", "conv2d", "tconv2d"):
            follows_relu = i + 1 < len(layers) and layers[i + 1].kind == "relu"
            spec.init = "he-normal" if follows_relu else "glorot-uniform"
    return layers


# ---------------------------------------------------------------- architectures


def _check_image_shape(input_shape: Sequence[int], stages: int) -> tuple[int, int, int]:
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ConfigError(f"expected an (h, w, c) image shape, got {tuple(input_shape)}")
    h, w, c = (int(s) for s in input_shape)
    if min(h, w) < 2**stages:
        raise ConfigError(f"image {h}x{w} is too small for {stages} stride-2 stages (need >= {2**stages})")
    return h, w, c


def build_autoencoder(input_shape: Sequence[int], code_dim: int = 32,
                      channels: Sequence[int] = (16, 32, 64), dtype=np.float32) -> Network:
    """Convolutional autoencoder whose reconstruction has the input's shape.

    Encoder: 3x3 stride-2 conv + relu per stage, flatten, dense to the code.
    Decoder mirrors it with transposed convolutions; output padding is chosen
    per stage so odd sizes (28 -> 14 -> 7 -> 4) map back exactly. The last
    layer is a sigmoid, so reconstructions lie in [0, 1].
    """
    if code_dim < 1:
        raise ConfigError("code_dim must be >= 1")
    h, w, c = _check_image_shape(input_shape, len(channels))
    sizes = [(h, w)]
    layers: list[LayerSpec] = []
    for ch in channels:
        layers += [LayerSpec("conv2d", ch, kernel=3, stride=2, pad=1), LayerSpec("relu")]
        ph, pw = sizes[-1]
        sizes.append((ad.conv_output_size(ph, 3, 2, 1), ad.conv_output_size(pw, 3, 2, 1)))
    bh, bw = sizes[-1]
    flat = bh * bw * channels[-1]
    layers += [LayerSpec("flatten"), LayerSpec("dense", code_dim)]
    code_layer = len(layers)
    layers += [LayerSpec("dense", flat), LayerSpec("relu"),
               LayerSpec("unflatten", target_shape=(bh, bw, channels[-1]))]
    out_channels = list(channels[-2::-1]) + [c]
    for k, ch in enumerate(out_channels):
        (sh, sw), (th, tw) = sizes[-1 - k], sizes[-2 - k]
        op_h, op_w = th - (2 * sh - 1), tw - (2 * sw - 1)
        if op_h != op_w:
            raise ConfigError(f"non-square stage {sh}x{sw} -> {th}x{tw} is not supported")
        layers.append(LayerSpec("tconv2d", ch, kernel=3, stride=2, pad=1, output_pad=op_h))
        layers.append(LayerSpec("relu") if k < len(out_channels) - 1 else LayerSpec("sigmoid"))
    net = Network("ae", (h, w, c), _with_inits(layers), dtype=dtype, latent_layer=code_layer)
    if net.shapes[-1] != (h, w, c):
        raise ConfigError(f"autoencoder output {net.shapes[-1]} does not match input {(h, w, c)}")
    return net


def build_backbone(input_shape: Sequence[int], latent_dim: int = 64,
                   channels: Sequence[int] = (32, 64, 128), dtype=np.float32) -> Network:
    """Feature extractor (conv stack -> dense latent z) plus a 1-unit sigmoid head.

    ``net.latent_layer`` is the index one past the layer producing z, so
    ``net.forward(x, stop=net.latent_layer)`` yields z and
    ``net.forward(z, start=net.latent_layer)`` yields the prediction.
    """
    if latent_dim < 1:
        raise ConfigError("latent_dim must be >= 1")
    h, w, c = _check_image_shape(input_shape, len(channels))
    layers: list[LayerSpec] = []
    for ch in channels:
        layers += [LayerSpec("conv2d", ch, kernel=3, stride=2, pad=1), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", latent_dim), LayerSpec("relu")]
    latent_layer = len(layers)
    layers += [LayerSpec("dense", 1), LayerSpec("sigmoid")]
    return Network("backbone", (h, w, c), _with_inits(layers), dtype=dtype, latent_layer=latent_layer)


# ---------------------------------------------------------------- checkpoint file


def write_checkpoint(target: str | Path | BinaryIO, arrays: dict[str, np.ndarray]) -> None:
    """Serialize named arrays as little-endian ICSP (float32 payloads)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    if hasattr(target, "write"):
        target.write(payload)
    else:
        Path(target).write_bytes(payload)


def read_checkpoint(source: str | Path | BinaryIO | bytes) -> dict[str, np.ndarray]:
    if isinstance(source, (bytes, bytearray)):
        buf = bytes(source)
    elif hasattr(source, "read"):
        buf = source.read()
    else:
        buf = Path(source).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError("not an ICSP checkpoint (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        try:
            size = struct.calcsize(fmt)
        except struct.error:
            raise DataError(f"corrupt checkpoint field at byte {pos}") from None
        if pos + size > len(buf):
            raise DataError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        (name,) = take(f"<{nlen}s")
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = math.prod(dims)
        (raw,) = take(f"<{4 * n}s")
        try:
            key = name.decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"parameter name before byte {pos} is not valid UTF-8") from None
        out[key] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes after checkpoint payload")
    return out


def save_network(net: Network, path: str | Path) -> None:
    write_checkpoint(path, net.state_dict())


def load_network(net: Network, path: str | Path) -> Network:
    net.load_state_dict(read_checkpoint(path))
    return net


def iter_kernels(net: Network) -> Iterable[Param]:
    return (p for p in net.params if p.role == "kernel")
