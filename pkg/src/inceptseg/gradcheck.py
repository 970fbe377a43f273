"""Central finite-difference checks for every differentiable primitive.

Each registered check builds a small random problem, contracts the op's
output with a fixed random weight tensor to get a scalar loss, and compares
the analytic gradients of that loss against central differences.

Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
keeps elements whose true gradient is ~0 from dividing noise by noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import recurrent, tensor
from .network import BatchNorm, Conv, Dropout, MaxPool, ReLU, InceptionBlock, Model, NetworkSpec, TwoConvBlock, build_model
from .training import bce_loss

STEP = 1e-4
OP_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(loss: Callable[[], float], arr: np.ndarray, step: float = STEP,
                       indices=None) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. ``arr`` (perturbed in place).

    With ``indices`` only those flat positions are probed; the result then
    has one entry per index.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(len(positions), dtype=np.float64)
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + step
        up = loss()
        flat[i] = old - step
        down = loss()
        flat[i] = old
        out[k] = (up - down) / (2.0 * step)
    return out.reshape(arr.shape) if indices is None else out


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _compare(loss, pairs: dict[str, tuple[np.ndarray, np.ndarray]], step=STEP) -> float:
    """``pairs`` maps a label to (array perturbed in place, analytic grad)."""
    return max(relative_error(g, numerical_gradient(loss, arr, step)) for arr, g in pairs.values())


# ---------------------------------------------------------------------------
# per-op checks
# ---------------------------------------------------------------------------


def check_conv2d(padding: str = "same") -> float:
    rng = _rng(1)
    x = rng.standard_normal((1, 4, 4, 2))
    k = tensor.Kernel4(rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3))
    w = rng.standard_normal(tensor.conv2d(x, k, padding).shape)

    def loss():
        return float((tensor.conv2d(x, k, padding) * w).sum())

    gx, gk, gb = tensor.conv2d_backward(w, x, k, padding)
    return _compare(loss, {"x": (x, gx), "k": (k.weight, gk), "b": (k.bias, gb)})


def check_transposed_conv() -> float:
    rng = _rng(2)
    x = rng.standard_normal((2, 3, 3, 2))
    k = tensor.Kernel4(rng.standard_normal((2, 2, 2, 3)), rng.standard_normal(3))
    w = rng.standard_normal((2, 6, 6, 3))

    def loss():
        return float((tensor.transposed_conv2x2(x, k) * w).sum())

    gx, gk, gb = tensor.transposed_conv2x2_backward(w, x, k)
    return _compare(loss, {"x": (x, gx), "k": (k.weight, gk), "b": (k.bias, gb)})


def check_maxpool() -> float:
    rng = _rng(3)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((2, 2, 2, 3))

    def loss():
        return float((tensor.maxpool2x2(x)[0] * w).sum())

    _, idx = tensor.maxpool2x2(x)
    return _compare(loss, {"x": (x, tensor.maxpool2x2_backward(w, idx))})


def check_concat() -> float:
    rng = _rng(4)
    a, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 3))
    w = rng.standard_normal((2, 3, 3, 5))

    def loss():
        return float((tensor.concat_channels(a, b) * w).sum())

    ga, gb = tensor.split_channels(w, 2)
    return _compare(loss, {"a": (a, ga), "b": (b, gb)})


def _unary(fn, backward, uses_output: bool, seed: int) -> float:
    rng = _rng(seed)
    x = _away_from_zero(rng, (2, 4, 4, 3))
    w = rng.standard_normal(x.shape)

    def loss():
        return float((fn(x) * w).sum())

    g = backward(w, fn(x) if uses_output else x)
    return _compare(loss, {"x": (x, g)})


def check_relu() -> float:
    return _unary(tensor.relu, tensor.relu_backward, False, 5)


def check_sigmoid() -> float:
    return _unary(tensor.sigmoid, tensor.sigmoid_backward, True, 6)


def check_tanh() -> float:
    return _unary(tensor.tanh, tensor.tanh_backward, True, 7)


def check_add() -> float:
    rng = _rng(8)
    a, b, w = (rng.standard_normal((2, 3, 3, 2)) for _ in range(3))

    def loss():
        return float((tensor.add(a, b) * w).sum())

    ga, gb = tensor.add_backward(w)
    return _compare(loss, {"a": (a, ga), "b": (b, gb)})


def check_hadamard() -> float:
    rng = _rng(9)
    a, b, w = (rng.standard_normal((2, 3, 3, 2)) for _ in range(3))

    def loss():
        return float((tensor.hadamard(a, b) * w).sum())

    ga, gb = tensor.hadamard_backward(w, a, b)
    return _compare(loss, {"a": (a, ga), "b": (b, gb)})


def check_batchnorm() -> float:
    rng = _rng(10)
    bn = BatchNorm("bn", 3)
    bn.gamma.value[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 4, 4, 3)) * 2.0 + 0.5
    w = rng.standard_normal(x.shape)

    def loss():
        return float((bn.forward(x, True) * w).sum())

    loss()
    gx = bn.backward(w)
    return _compare(loss, {"x": (x, gx), "gamma": (bn.gamma.value, bn.gamma.grad.copy()),
                           "beta": (bn.beta.value, bn.beta.grad.copy())})


def check_dropout() -> float:
    rng = _rng(11)
    layer = Dropout("drop", 0.5, seed=3)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal(x.shape)

    def loss():
        return float((layer.forward(x, True, 7) * w).sum())

    loss()
    return _compare(loss, {"x": (x, layer.backward(w))})


def _random_cell(rng, c_in: int, hidden: int, scale: float = 0.5) -> recurrent.ConvLSTMParams:
    p = recurrent.ConvLSTMParams.zeros(c_in, hidden)
    for v in p.as_dict().values():
        v[...] = rng.standard_normal(v.shape) * scale
    return p


def check_convlstm_step() -> float:
    rng = _rng(12)
    p = _random_cell(rng, 2, 3)
    x = rng.standard_normal((1, 4, 4, 2))
    h = rng.standard_normal((1, 4, 4, 3)) * 0.5
    c = rng.standard_normal((1, 4, 4, 3))
    wh, wc = rng.standard_normal(h.shape), rng.standard_normal(c.shape)

    def loss():
        s, _ = recurrent.convlstm_step(x, recurrent.ConvLSTMState(h, c), p)
        return float((s.H * wh).sum() + (s.C * wc).sum())

    _, cache = recurrent.convlstm_step(x, recurrent.ConvLSTMState(h, c), p)
    dx, dh, dc, grads = recurrent.convlstm_backward(wh, wc, cache)
    pairs = {"x": (x, dx), "h": (h, dh), "c": (c, dc)}
    pairs.update({k: (v, getattr(grads, k)) for k, v in p.as_dict().items()})
    return _compare(loss, pairs)


def random_bconvlstm(rng, c_in: int, hidden: int, out: int, k_y: int = 1,
                     scale: float = 0.5) -> recurrent.BConvLSTMParams:
    return recurrent.BConvLSTMParams(_random_cell(rng, c_in, hidden, scale), _random_cell(rng, c_in, hidden, scale),
                                     rng.standard_normal((k_y, k_y, hidden, out)) * scale,
                                     rng.standard_normal((k_y, k_y, hidden, out)) * scale,
                                     rng.standard_normal(out) * scale)


def check_bconvlstm_fuse() -> float:
    rng = _rng(13)
    p = random_bconvlstm(rng, 2, 3, 2, k_y=3)
    enc, dec = rng.standard_normal((1, 4, 4, 2)), rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((1, 4, 4, 2))

    def loss():
        return float((recurrent.bconvlstm_fuse(enc, dec, p)[0] * w).sum())

    _, cache = recurrent.bconvlstm_fuse(enc, dec, p)
    d_enc, d_dec, grads = recurrent.bconvlstm_backward(w, cache)
    pairs = {"enc": (enc, d_enc), "dec": (dec, d_dec)}
    for direction in ("fwd", "bwd"):
        for k, v in getattr(p, direction).as_dict().items():
            pairs[f"{direction}.{k}"] = (v, getattr(getattr(grads, direction), k))
    for k in ("w_y_fwd", "w_y_bwd", "b_y"):
        pairs[k] = (getattr(p, k), getattr(grads, k))
    return _compare(loss, pairs)


def check_bce() -> float:
    rng = _rng(14)
    pred = rng.uniform(0.05, 0.95, (2, 4, 4, 1))
    target = (rng.random(pred.shape) < 0.5).astype(float)
    _, g = bce_loss(pred, target)
    return relative_error(g, numerical_gradient(lambda: bce_loss(pred, target)[0], pred))


def _check_block(block) -> float:
    rng = _rng(15)
    for p in block_params(block):
        p.value[...] = rng.standard_normal(p.value.shape) * 0.4
    x = rng.standard_normal((1, 6, 6, 3))
    w = rng.standard_normal(block.forward(x, False).shape)

    def loss():
        return float((block.forward(x, True) * w).sum())

    loss()
    gx = block.backward(w)
    pairs = {"x": (x, gx)}
    pairs.update({p.name: (p.value, p.grad.copy()) for p in block_params(block)})
    return _compare(loss, pairs)


def block_params(block):
    from .network import _walk

    return [p for layer in _walk(block) for p in layer.parameters()]


def check_inception_block() -> float:
    return _check_block(InceptionBlock("inc", 3, 8))


def check_twoconv_block() -> float:
    return _check_block(TwoConvBlock("two", 3, 4))


OPS: dict[str, Callable[[], float]] = {
    "conv2d": check_conv2d,
    "conv2d_valid": lambda: check_conv2d("valid"),
    "transposed_conv2x2": check_transposed_conv,
    "maxpool2x2": check_maxpool,
    "concat_channels": check_concat,
    "add": check_add,
    "hadamard": check_hadamard,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "tanh": check_tanh,
    "batchnorm": check_batchnorm,
    "dropout": check_dropout,
    "convlstm_step": check_convlstm_step,
    "bconvlstm_fuse": check_bconvlstm_fuse,
    "bce_loss": check_bce,
    "twoconv_block": check_twoconv_block,
    "inception_block": check_inception_block,
}


def run_op_suite(tolerance: float = OP_TOLERANCE) -> list[CheckResult]:
    return [CheckResult(name, fn(), tolerance) for name, fn in OPS.items()]


# ---------------------------------------------------------------------------
# whole graph
# ---------------------------------------------------------------------------

TINY_FILTERS = (4, 8, 16, 32)


def tiny_spec(variant: str = "inceptnet", d: int = 3, seed: int = 0) -> NetworkSpec:
    return NetworkSpec(variant=variant, d=d, base_filters=TINY_FILTERS, input_shape=(8, 8, 1), seed=seed)


def decision_signature(model: Model) -> bytes:
    """Packed bits of every ReLU on/off state and max-pool winner from the
    last train-mode forward.  Equal signatures mean both forwards ran on the
    same linear piece of the network."""
    parts = []
    for layer in model.layers():
        cache = getattr(layer, "_cache", None)
        if cache is None:
            continue
        if isinstance(layer, Conv) and layer.relu:
            parts.append(np.packbits(cache[1] > 0).tobytes())
        elif isinstance(layer, ReLU):
            parts.append(np.packbits(cache > 0).tobytes())
        elif isinstance(layer, MaxPool):
            parts.append(cache.astype(np.uint8).tobytes())
    return b"".join(parts)


@dataclass
class GraphCheck:
    worst: float
    checked: int
    kink_skipped: int
    tolerance: float = GRAPH_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance and self.checked > 0

    @property
    def skipped_fraction(self) -> float:
        return self.kink_skipped / max(1, self.checked + self.kink_skipped)


def check_graph(spec: NetworkSpec | None = None, per_param: int = 2, seed: int = 0,
                step: float = STEP) -> GraphCheck:
    """Whole-model check: every input element plus ``per_param`` sampled
    coordinates from every trainable parameter tensor.

    Dropout stays active with a fixed mask (same step key every forward).
    Biases start at zero after init, which puts ReLUs fed by dead channels
    exactly on their kink; they are redrawn so the probe point is generic.
    A probe whose +step or -step forward flips any ReLU or max-pool decision
    differences across a kink and measures nothing; it is counted in
    ``kink_skipped`` instead of being compared.
    """
    spec = spec or tiny_spec()
    model: Model = build_model(spec)
    rng = _rng(seed)
    for p in model.trainable():
        if p.value.ndim == 1 and not p.name.endswith("gamma"):
            p.value[...] = rng.uniform(-0.2, 0.2, p.value.shape)
    h, w, c = spec.input_shape
    x = rng.standard_normal((2, h, w, c))
    target = (rng.random((2, h, w, 1)) < 0.5).astype(float)

    def probe():
        value = bce_loss(model.forward(x, "train", step=1), target)[0]
        return value, decision_signature(model)

    model.zero_grad()
    _, g = bce_loss(model.forward(x, "train", step=1), target)
    base = decision_signature(model)
    model.backward(g)
    probes = [(x, model.input_grad, range(x.size))]
    for p in model.trainable():
        idx = rng.choice(p.size, size=min(per_param, p.size), replace=False)
        probes.append((p.value, p.grad.reshape(-1)[idx].copy(), idx))

    worst, checked, skipped = 0.0, 0, 0
    for arr, analytic, positions in probes:
        flat, analytic = arr.reshape(-1), np.asarray(analytic).reshape(-1)
        for k, i in enumerate(positions):
            old = flat[i]
            flat[i] = old + step
            up, sig_up = probe()
            flat[i] = old - step
            down, sig_down = probe()
            flat[i] = old
            if sig_up != base or sig_down != base:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative_error(analytic[k:k + 1], np.array([(up - down) / (2.0 * step)])))
    return GraphCheck(worst, checked, skipped)
