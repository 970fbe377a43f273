"""Layers, blocks and the three model variants (unet, bcdu, inceptnet).

Every layer pairs an explicit ``forward`` with an explicit ``backward``.  A
train-mode forward stores what the backward needs on the layer itself; an
infer-mode forward stores nothing, so calling ``backward`` afterwards raises
:class:`~inceptseg.errors.UsageError`.

Layout of a built model (``L`` = 3 pooling levels)::

    enc1 -> pool -> enc2 -> pool -> enc3 -> pool -> bottleneck (d blocks)
    -> up3 -> bn3 -> relu -> fuse3(enc3, .) -> dec3 -> drop3
    -> up2 -> ...                                    -> drop1
    -> head (1x1 conv) -> sigmoid
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import recurrent
from .errors import ConfigError, ShapeError, UsageError
from .recurrent import BConvLSTMParams, ConvLSTMParams
from .rng import stream
from .tensor import (
    DTYPE,
    Kernel4,
    concat_channels,
    conv2d_backward,
    conv2d_with_cols,
    maxpool2x2,
    maxpool2x2_backward,
    relu_backward,
    sigmoid,
    transposed_conv2x2,
    transposed_conv2x2_backward,
)

VARIANTS = ("unet", "bcdu", "inceptnet")
RUNNING_SUFFIXES = (".running_mean", ".running_var")
_TRUNC2_STD = 0.87962566103423978  # std of N(0, 1) truncated to [-2, 2]


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)
    adam_m: np.ndarray = field(init=False, repr=False)
    adam_v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _he_init(p: Parameter, fan_in: int, seed: int) -> None:
    rng = stream(seed, "init", p.name)
    z = rng.standard_normal(p.value.shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    p.value[...] = z * (np.sqrt(2.0 / fan_in) / _TRUNC2_STD)


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------


@dataclass
class NetworkSpec:
    """Everything needed to rebuild a model bit-for-bit.

    The width knobs below the seed control how the fixed filter budget is
    split inside fusion and Inception blocks; their defaults put the full-size
    parameter totals within a few percent of the published counts.
    """

    variant: str = "inceptnet"
    d: int = 1
    base_filters: tuple[int, ...] = (64, 128, 256, 512)
    input_shape: tuple[int, int, int] = (64, 64, 1)
    dropout_rate: float = 0.5
    seed: int = 0
    lstm_hidden_ratio: float = 0.25
    fuse_ratio: float = 0.5
    fuse_kernel: int = 1
    inception_widths: tuple[float, float, float] = (0.25, 0.5, 1.0)

    def __post_init__(self):
        self.base_filters = tuple(int(f) for f in self.base_filters)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.inception_widths = tuple(float(w) for w in self.inception_widths)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d not in (1, 3):
            raise ConfigError(f"d must be 1 or 3, got {self.d}")
        f = self.base_filters
        if len(f) != 4 or f[0] < 1 or any(b != 2 * a for a, b in zip(f, f[1:])):
            raise ConfigError(f"base_filters must be 4 values doubling each level, got {list(f)}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (h, w, c), got {self.input_shape}")
        h, w, _ = self.input_shape
        if h % 8 or w % 8:
            raise ConfigError(f"input height and width must be divisible by 8, got {h}x{w}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant == "inceptnet" and f[0] % 4:
            raise ConfigError(f"inception blocks need filter counts divisible by 4, got {f[0]}")
        if self.fuse_kernel % 2 == 0:
            raise ConfigError("fuse_kernel must be odd")
        for name, ratio in [("lstm_hidden_ratio", self.lstm_hidden_ratio), ("fuse_ratio", self.fuse_ratio),
                            *(("inception_widths", r) for r in self.inception_widths)]:
            if ratio <= 0 or _width(f[0], ratio) < 1:
                raise ConfigError(f"{name}={ratio} gives an empty layer at {f[0]} filters")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("base_filters", "input_shape", "inception_widths"):
            d[k] = list(d[k])
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**known)


def _width(channels: int, ratio: float) -> int:
    return max(1, int(round(channels * ratio)))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    name: str = ""
    kind: str = "layer"

    def parameters(self) -> Iterator[Parameter]:
        return iter(())

    def children(self) -> Iterator["Layer"]:
        return iter(())

    def _need(self, cache):
        if cache is None:
            raise UsageError(f"{self.name}: backward called without a train-mode forward")
        return cache


class Conv(Layer):
    kind = "conv"

    def __init__(self, name: str, k: int, c_in: int, c_out: int, relu: bool = True):
        self.name, self.relu = name, relu
        self.kernel = Parameter(f"{name}.kernel", np.zeros((k, k, c_in, c_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))
        self._cache = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.kernel.value.shape

    def parameters(self):
        yield self.kernel
        yield self.bias

    def init(self, seed: int) -> None:
        kh, kw, ci, _ = self.shape
        _he_init(self.kernel, kh * kw * ci, seed)

    def forward(self, x, train, ctx=None):
        y, cols = conv2d_with_cols(x, Kernel4(self.kernel.value, self.bias.value))
        if self.relu:
            y = np.maximum(y, 0.0)
        self._cache = (x, y, cols) if train else None
        return y

    def backward(self, g):
        x, y, cols = self._need(self._cache)
        if self.relu:
            g = g * (y > 0)
        gx, gw, gb = conv2d_backward(g, x, Kernel4(self.kernel.value, self.bias.value), cols=cols)
        self.kernel.grad += gw
        self.bias.grad += gb
        return gx


class TransposedConv(Layer):
    kind = "tconv"

    def __init__(self, name: str, c_in: int, c_out: int):
        self.name = name
        self.kernel = Parameter(f"{name}.kernel", np.zeros((2, 2, c_in, c_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))
        self._cache = None

    @property
    def shape(self):
        return self.kernel.value.shape

    def parameters(self):
        yield self.kernel
        yield self.bias

    def init(self, seed: int) -> None:
        _he_init(self.kernel, 4 * self.shape[2], seed)

    def forward(self, x, train, ctx=None):
        self._cache = x if train else None
        return transposed_conv2x2(x, Kernel4(self.kernel.value, self.bias.value))

    def backward(self, g):
        x = self._need(self._cache)
        gx, gw, gb = transposed_conv2x2_backward(g, x, Kernel4(self.kernel.value, self.bias.value))
        self.kernel.grad += gw
        self.bias.grad += gb
        return gx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, c: int, momentum: float = 0.99, eps: float = 1e-5):
        self.name, self.momentum, self.eps = name, momentum, eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(c))
        self.beta = Parameter(f"{name}.beta", np.zeros(c))
        self.running_mean = Parameter(f"{name}.running_mean", np.zeros(c), trainable=False)
        self.running_var = Parameter(f"{name}.running_var", np.ones(c), trainable=False)
        self._cache = None

    def parameters(self):
        yield from (self.gamma, self.beta, self.running_mean, self.running_var)

    def forward(self, x, train, ctx=None):
        if not train:
            self._cache = None
            scale = self.gamma.value / np.sqrt(self.running_var.value + self.eps)
            return (x - self.running_mean.value) * scale + self.beta.value
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mu) * inv
        m = self.momentum
        self.running_mean.value[...] = m * self.running_mean.value + (1.0 - m) * mu
        self.running_var.value[...] = m * self.running_var.value + (1.0 - m) * var
        self._cache = (x_hat, inv)
        return x_hat * self.gamma.value + self.beta.value

    @property
    def normalized(self) -> np.ndarray:
        """Pre-scale activations from the last train-mode forward."""
        return self._need(self._cache)[0]

    def backward(self, g):
        x_hat, inv = self._need(self._cache)
        axes = (0, 1, 2)
        m = g.shape[0] * g.shape[1] * g.shape[2]
        sg = g.sum(axis=axes)
        sgx = (g * x_hat).sum(axis=axes)
        self.beta.grad += sg
        self.gamma.grad += sgx
        return (self.gamma.value * inv / m) * (m * g - sg - x_hat * sgx)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x, train, ctx=None):
        self._cache = x if train else None
        return np.maximum(x, 0.0)

    def backward(self, g):
        return relu_backward(g, self._need(self._cache))


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def forward(self, x, train, ctx=None):
        y, idx = maxpool2x2(x)
        self._cache = idx if train else None
        return y

    def backward(self, g):
        return maxpool2x2_backward(g, self._need(self._cache))


class Dropout(Layer):
    """Inverted dropout; the mask is keyed by (seed, step, layer name)."""

    kind = "dropout"

    def __init__(self, name: str, rate: float, seed: int):
        self.name, self.rate, self.seed = name, rate, seed
        self._cache = None

    def forward(self, x, train, ctx=None):
        if not train or self.rate == 0.0:
            self._cache = 1.0 if train else None
            return x
        step = 0 if ctx is None else ctx
        keep = stream(self.seed, "dropout", step, self.name).random(x.shape) >= self.rate
        mask = keep / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._need(self._cache)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class Sequence(Layer):
    kind = "sequence"

    def __init__(self, name: str, layers: list[Layer]):
        self.name, self.layers = name, layers

    def children(self):
        return iter(self.layers)

    def forward(self, x, train, ctx=None):
        for layer in self.layers:
            x = layer.forward(x, train, ctx)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class TwoConvBlock(Sequence):
    """Two 3x3 convolutions, each followed by ReLU."""

    kind = "twoconv"

    def __init__(self, name: str, c_in: int, filters: int):
        super().__init__(name, [Conv(f"{name}.conv0", 3, c_in, filters), Conv(f"{name}.conv1", 3, filters, filters)])
        self.out_channels = filters


class InceptionBlock(Layer):
    """Four parallel branches concatenated on channels.

    b1 is a 1x1 conv; b2, b3, b4 are chains of one, two and three 3x3 convs,
    i.e. receptive fields of 3, 5 and 7 pixels.  Each branch emits
    ``filters // 4`` channels.  ``widths`` sets the intermediate widths of
    the chained branches as fractions of ``filters``: ``(b3 mid, b4 mid 1,
    b4 mid 2)``.
    """

    kind = "inception"

    def __init__(self, name: str, c_in: int, filters: int, widths=(0.25, 0.5, 1.0)):
        if filters % 4:
            raise ConfigError(f"{name}: inception filters must be divisible by 4, got {filters}")
        q = filters // 4
        m3, m4a, m4b = (_width(filters, r) for r in widths)
        self.name = name
        self.out_channels = filters
        self.branches = [
            Sequence(f"{name}.b1", [Conv(f"{name}.b1.conv0", 1, c_in, q)]),
            Sequence(f"{name}.b2", [Conv(f"{name}.b2.conv0", 3, c_in, q)]),
            Sequence(f"{name}.b3", [Conv(f"{name}.b3.conv0", 3, c_in, m3), Conv(f"{name}.b3.conv1", 3, m3, q)]),
            Sequence(f"{name}.b4", [Conv(f"{name}.b4.conv0", 3, c_in, m4a), Conv(f"{name}.b4.conv1", 3, m4a, m4b),
                                    Conv(f"{name}.b4.conv2", 3, m4b, q)]),
        ]
        self._q = q

    def children(self):
        return iter(self.branches)

    def forward(self, x, train, ctx=None):
        return np.concatenate([b.forward(x, train, ctx) for b in self.branches], axis=3)

    def backward(self, g):
        q = self._q
        gx = None
        for k, b in enumerate(self.branches):
            gk = b.backward(np.ascontiguousarray(g[..., k * q:(k + 1) * q]))
            gx = gk if gx is None else gx + gk
        return gx


def make_block(spec: NetworkSpec, name: str, c_in: int, filters: int) -> Layer:
    if spec.variant == "inceptnet":
        return InceptionBlock(name, c_in, filters, spec.inception_widths)
    return TwoConvBlock(name, c_in, filters)


class DenseBottleneck(Layer):
    """d=1: one block.  d=3: B3 consumes concat(B1 out, B2 out)."""

    kind = "bottleneck"

    def __init__(self, name: str, spec: NetworkSpec, c_in: int, filters: int, d: int):
        if d not in (1, 3):
            raise ConfigError(f"unsupported dense block count d={d}")
        self.name, self.d = name, d
        self.blocks = [make_block(spec, f"{name}.block1", c_in, filters)]
        if d == 3:
            self.blocks.append(make_block(spec, f"{name}.block2", filters, filters))
            self.blocks.append(make_block(spec, f"{name}.block3", 2 * filters, filters))
        self.out_channels = filters

    def children(self):
        return iter(self.blocks)

    def forward(self, x, train, ctx=None):
        out1 = self.blocks[0].forward(x, train, ctx)
        if self.d == 1:
            return out1
        out2 = self.blocks[1].forward(out1, train, ctx)
        return self.blocks[2].forward(concat_channels(out1, out2), train, ctx)

    def backward(self, g):
        if self.d == 1:
            return self.blocks[0].backward(g)
        gcat = self.blocks[2].backward(g)
        c = self.out_channels
        g1 = gcat[..., :c] + self.blocks[1].backward(np.ascontiguousarray(gcat[..., c:]))
        return self.blocks[0].backward(g1)


class ConcatFuse(Layer):
    """Plain U-net skip: concat(encoder map, decoder map)."""

    kind = "concat"

    def __init__(self, name: str, c: int):
        self.name, self._c = name, c
        self.out_channels = 2 * c

    def forward(self, enc, dec, train):
        return concat_channels(enc, dec)

    def backward(self, g):
        return g[..., :self._c], g[..., self._c:]


class BConvLSTMFuse(Layer):
    kind = "bconvlstm"

    def __init__(self, name: str, c: int, hidden: int, out: int, k_y: int = 1):
        self.name = name
        self.out_channels = out
        self.params: dict[str, Parameter] = {}
        template = BConvLSTMParams.zeros(c, hidden, out, k=3, k_y=k_y)
        for direction in ("fwd", "bwd"):
            for pname, v in getattr(template, direction).as_dict().items():
                self.params[f"{direction}.{pname}"] = Parameter(f"{name}.{direction}.{pname}", v)
        for pname in ("w_y_fwd", "w_y_bwd", "b_y"):
            self.params[pname] = Parameter(f"{name}.{pname}", getattr(template, pname))
        self._cache = None

    def parameters(self):
        return iter(self.params.values())

    def init(self, seed: int) -> None:
        for key, p in self.params.items():
            short = key.rsplit(".", 1)[-1]
            if short.startswith(("w_x", "w_h", "w_y")):
                kh, kw, ci, _ = p.value.shape
                _he_init(p, kh * kw * ci, seed)

    def _struct(self, attr: str = "value") -> BConvLSTMParams:
        def cell(direction):
            return ConvLSTMParams(**{k.split(".", 1)[1]: getattr(p, attr) for k, p in self.params.items()
                                     if k.startswith(direction + ".")})
        return BConvLSTMParams(cell("fwd"), cell("bwd"), getattr(self.params["w_y_fwd"], attr),
                               getattr(self.params["w_y_bwd"], attr), getattr(self.params["b_y"], attr))

    def forward(self, enc, dec, train):
        y, cache = recurrent.bconvlstm_fuse(enc, dec, self._struct())
        self._cache = cache if train else None
        return y

    def backward(self, g):
        d_enc, d_dec, grads = recurrent.bconvlstm_backward(g, self._need(self._cache))
        for direction in ("fwd", "bwd"):
            for pname, v in getattr(grads, direction).as_dict().items():
                self.params[f"{direction}.{pname}"].grad += v
        for pname in ("w_y_fwd", "w_y_bwd", "b_y"):
            self.params[pname].grad += getattr(grads, pname)
        return d_enc, d_dec


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Edge(NamedTuple):
    src: str
    dst: str
    kind: str  # sequential | skip | dense-concat


def _walk(layer: Layer) -> Iterator[Layer]:
    yield layer
    for child in layer.children():
        yield from _walk(child)


class Model:
    """An assembled segmentation network (the layer DAG plus its parameter table)."""

    def __init__(self, spec: NetworkSpec):
        spec.validate()
        self.spec = spec
        f = spec.base_filters
        h, w, c_in = spec.input_shape
        fused_bn = spec.variant != "unet"

        self.encoders: list[Layer] = []
        self.pools: list[MaxPool] = []
        c = c_in
        for k in range(3):
            self.encoders.append(make_block(spec, f"enc{k + 1}", c, f[k]))
            self.pools.append(MaxPool(f"pool{k + 1}"))
            c = f[k]
        self.bottleneck = DenseBottleneck("bottleneck", spec, c, f[3], spec.d)

        self.ups, self.norms, self.acts, self.fuses, self.decoders, self.drops = [], [], [], [], [], []
        for k in range(3):
            self.ups.append(TransposedConv(f"up{k + 1}", f[k + 1], f[k]))
            self.norms.append(BatchNorm(f"bn{k + 1}", f[k]))
            self.acts.append(ReLU(f"act{k + 1}"))
            if fused_bn:
                fuse = BConvLSTMFuse(f"fuse{k + 1}", f[k], _width(f[k], spec.lstm_hidden_ratio),
                                     _width(f[k], spec.fuse_ratio), spec.fuse_kernel)
            else:
                fuse = ConcatFuse(f"fuse{k + 1}", f[k])
            self.fuses.append(fuse)
            self.decoders.append(make_block(spec, f"dec{k + 1}", fuse.out_channels, f[k]))
            self.drops.append(Dropout(f"drop{k + 1}", spec.dropout_rate, spec.seed))
        self.head = Conv("head", 1, f[0], 1, relu=False)
        self._out = None
        self._init_parameters()

    # -- structure ---------------------------------------------------------

    def top_layers(self) -> list[Layer]:
        layers: list[Layer] = []
        for enc, pool in zip(self.encoders, self.pools):
            layers += [enc, pool]
        layers.append(self.bottleneck)
        for k in (2, 1, 0):
            layers += [self.ups[k], self.norms[k], self.acts[k], self.fuses[k], self.decoders[k], self.drops[k]]
        layers.append(self.head)
        return layers

    def layers(self) -> Iterator[Layer]:
        for top in self.top_layers():
            yield from _walk(top)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def parameter_table(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def edges(self) -> list[Edge]:
        tops = self.top_layers()
        edges = [Edge(a.name, b.name, "sequential") for a, b in zip(tops, tops[1:])]
        edges += [Edge(self.encoders[k].name, self.fuses[k].name, "skip") for k in range(3)]
        if self.spec.d == 3:
            b = self.bottleneck.blocks
            edges += [Edge(b[0].name, b[1].name, "sequential"), Edge(b[0].name, b[2].name, "dense-concat"),
                      Edge(b[1].name, b[2].name, "dense-concat")]
        return edges

    def _init_parameters(self) -> None:
        seed = self.spec.seed
        for layer in self.layers():
            if hasattr(layer, "init"):
                layer.init(seed)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "infer", step: int = 0) -> np.ndarray:
        """Probabilities in (0, 1), shape (n, h, w, 1).

        ``mode='train'`` uses batch statistics and active dropout and keeps
        the caches ``backward`` needs; ``step`` keys the dropout masks.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        train = mode == "train"
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match input_shape {self.spec.input_shape}")
        x = np.asarray(x, dtype=DTYPE)
        skips = []
        h = x
        for enc, pool in zip(self.encoders, self.pools):
            h = enc.forward(h, train, step)
            skips.append(h)
            h = pool.forward(h, train, step)
        h = self.bottleneck.forward(h, train, step)
        for k in (2, 1, 0):
            u = self.ups[k].forward(h, train, step)
            u = self.norms[k].forward(u, train, step)
            u = self.acts[k].forward(u, train, step)
            fused = self.fuses[k].forward(skips[k], u, train)
            h = self.decoders[k].forward(fused, train, step)
            h = self.drops[k].forward(h, train, step)
        out = sigmoid(self.head.forward(h, train, step))
        self._out = out if train else None
        return out

    def backward(self, grad_loss: np.ndarray) -> None:
        """Accumulate d(loss)/d(parameter) into every ``Parameter.grad``.

        ``grad_loss`` is the gradient w.r.t. the output probabilities.
        Gradients add up across calls until :meth:`zero_grad`.
        """
        if self._out is None:
            raise UsageError("backward needs a preceding train-mode forward")
        self.input_grad = self._backward(grad_loss)

    def _backward(self, grad_loss):
        y = self._out
        g = self.head.backward(grad_loss * y * (1.0 - y))
        skip_grads = [None, None, None]
        for k in (0, 1, 2):
            g = self.drops[k].backward(g)
            g = self.decoders[k].backward(g)
            g_enc, g = self.fuses[k].backward(g)
            skip_grads[k] = g_enc
            g = self.acts[k].backward(g)
            g = self.norms[k].backward(g)
            g = self.ups[k].backward(g)
        g = self.bottleneck.backward(g)
        for k in (2, 1, 0):
            g = self.pools[k].backward(g)
            g = self.encoders[k].backward(g + skip_grads[k])
        return g


def build_model(spec: NetworkSpec) -> Model:
    return Model(spec)


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------


class LayerCount(NamedTuple):
    name: str
    kind: str
    shapes: tuple[tuple[int, ...], ...]
    count: int
    closed_form: int


def _closed_form(layer: Layer) -> int:
    if isinstance(layer, (Conv, TransposedConv)):
        kh, kw, ci, co = layer.shape
        return kh * kw * ci * co + co
    if isinstance(layer, BatchNorm):
        return 4 * layer.gamma.size
    if isinstance(layer, BConvLSTMFuse):
        w = layer.params["fwd.w_xi"].value.shape
        k, ci, F = w[0], w[2], w[3]
        cell = 4 * k * k * (ci + F) * F + 4 * F + 3 * F  # gate kernels + biases + peepholes
        ky, _, _, out = layer.params["w_y_fwd"].value.shape
        return 2 * cell + 2 * ky * ky * F * out + out
    return 0


def count_parameters(model: Model) -> tuple[int, list[LayerCount]]:
    """Total element count and one row per parameter-owning layer.

    Batch-norm running statistics are counted, as they are stored with the
    model.
    """
    rows = []
    for layer in model.layers():
        params = list(layer.parameters())
        if not params:
            continue
        count = sum(p.size for p in params)
        rows.append(LayerCount(layer.name, layer.kind, tuple(p.value.shape for p in params), count,
                               _closed_form(layer)))
    return sum(r.count for r in rows), rows


def format_audit(total: int, rows: list[LayerCount]) -> str:
    lines = [f"{'layer':<34}{'kind':<11}{'params':>12}  shapes"]
    for r in rows:
        shapes = " ".join("x".join(map(str, s)) for s in r.shapes)
        if len(shapes) > 60:
            shapes = shapes[:57] + "..."
        lines.append(f"{r.name:<34}{r.kind:<11}{r.count:>12,}  {shapes}")
    lines.append(f"{'total':<45}{total:>12,}")
    return "\n".join(lines)
