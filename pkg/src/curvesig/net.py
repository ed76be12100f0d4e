"""Signature network: stacked 1D convolutions with exact backpropagation.

One arm of the Siamese pair maps an ``(N, 2)`` curve to an ``N``-long
signature.  Each stage is conv -> ReLU -> conv -> ReLU, optionally followed by a
pointwise max over filters; a linear head combines the final channels.

Internally activations are laid out ``[batch, points, channels]`` and kept in
float64; the public ``conv1d``/``channel_max`` take ``[channels, points]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .curve import PlanarCurve, normalize_curve
from .invariants import Signature

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a weight file is malformed or has an unsupported version."""


@dataclass(frozen=True)
class Architecture:
    stages: int = 3
    convs_per_stage: int = 2
    filters: int = 15
    width: int = 5
    stage_has_channel_max: tuple[bool, ...] = (True, True, False)
    input_channels: int = 2
    output_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_has_channel_max", tuple(bool(v) for v in self.stage_has_channel_max))
        if self.width < 1 or self.width % 2 == 0:
            raise ValueError(f"filter width must be odd, got {self.width}")
        if min(self.stages, self.convs_per_stage, self.filters, self.input_channels) < 1:
            raise ValueError("stages, convs_per_stage, filters and input_channels must be >= 1")
        if len(self.stage_has_channel_max) != self.stages:
            raise ValueError("stage_has_channel_max needs one entry per stage")
        if self.output_channels != 1:
            raise ValueError("only a single output channel is supported")

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        channels = self.input_channels
        for stage in range(self.stages):
            for _ in range(self.convs_per_stage):
                shapes.append((self.filters, channels, self.width))
                channels = self.filters
            if self.stage_has_channel_max[stage]:
                channels = 1
        return shapes

    @property
    def head_inputs(self) -> int:
        return 1 if self.stage_has_channel_max[-1] else self.filters

    @property
    def receptive_radius(self) -> int:
        return self.stages * self.convs_per_stage * (self.width // 2)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stage_has_channel_max"] = list(self.stage_has_channel_max)
        return d


@dataclass(eq=False)
class Model:
    arch: Architecture
    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    linear_weights: np.ndarray
    linear_bias: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        shapes = self.arch.conv_shapes()
        if len(self.conv_weights) != len(shapes) or len(self.conv_biases) != len(shapes):
            raise ValueError("number of conv layers does not match architecture")
        for w, b, shape in zip(self.conv_weights, self.conv_biases, shapes):
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"conv parameter shapes {w.shape}/{b.shape} do not match {shape}")
        if self.linear_weights.shape != (self.arch.head_inputs,):
            raise ValueError("linear head shape does not match architecture")
        self.linear_bias = np.asarray(self.linear_bias, dtype=np.float64).reshape(1)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out += [w, b]
        return out + [self.linear_weights, self.linear_bias]

    def param_names(self) -> list[str]:
        names = []
        per = self.arch.convs_per_stage
        for i in range(len(self.conv_weights)):
            prefix = f"stage{i // per + 1}.conv{i % per + 1}"
            names += [f"{prefix}.weight", f"{prefix}.bias"]
        return names + ["linear.weight", "linear.bias"]

    @classmethod
    def from_params(cls, arch: Architecture, params) -> "Model":
        params = [np.array(p, dtype=np.float64) for p in params]
        n = len(arch.conv_shapes())
        return cls(arch, params[0 : 2 * n : 2], params[1 : 2 * n : 2], params[2 * n], params[2 * n + 1])

    def copy(self) -> "Model":
        return Model.from_params(self.arch, self.params())

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def equals(self, other: "Model") -> bool:
        """Bitwise parameter equality."""
        return self.arch == other.arch and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.params(), other.params())
        )


INIT_GAIN = 1.0


def init_model(arch: Architecture | None = None, seed=0, gain: float | None = None) -> Model:
    """Weights uniform in ``[-b, b]`` with ``b = gain * sqrt(1 / fan_in)``; zero biases."""
    arch = arch or Architecture()
    gain = INIT_GAIN if gain is None else gain
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for f, c, w in arch.conv_shapes():
        bound = gain * math.sqrt(1.0 / (c * w))
        weights.append(rng.uniform(-bound, bound, size=(f, c, w)))
        biases.append(np.zeros(f))
    bound = gain * math.sqrt(1.0 / arch.head_inputs)
    head = rng.uniform(-bound, bound, size=arch.head_inputs)
    return Model(arch, weights, biases, head, np.zeros(1))


# --------------------------------------------------------------------------
# layers


def pad_indices(n: int, radius: int, padding: str) -> np.ndarray:
    """Source index for each position of a sequence padded by ``radius`` on both ends."""
    j = np.arange(-radius, n + radius)
    if padding == "wrap":
        return j % n
    if padding == "reflect":
        if radius >= n:
            raise ValueError(f"reflect padding of {radius} needs more than {n} points")
        j = np.abs(j)
        return np.where(j >= n, 2 * (n - 1) - j, j)
    raise ValueError(f"unknown padding {padding!r}")


def _conv_forward(x, w, b, pad_idx):
    B, N, C = x.shape
    F, _, W = w.shape
    cols = sliding_window_view(x[:, pad_idx, :], W, axis=1).reshape(B * N, C * W)
    out = (cols @ w.reshape(F, C * W).T).reshape(B, N, F)
    return out + b, cols


def _conv_backward(dout, cols, w, pad_idx, n):
    B, N, F = dout.shape
    _, C, W = w.shape
    d2 = dout.reshape(B * N, F)
    dw = (d2.T @ cols).reshape(F, C, W)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(F, C * W)).reshape(B, N, C, W)
    dpad = np.zeros((B, len(pad_idx), C))
    for k in range(W):
        dpad[:, k : k + N, :] += dcols[..., k]
    radius = W // 2
    dx = dpad[:, radius : radius + n, :].copy()
    for j in list(range(radius)) + list(range(radius + n, len(pad_idx))):
        dx[:, pad_idx[j], :] += dpad[:, j, :]
    return dx, dw, db


def conv1d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, padding: str = "wrap") -> np.ndarray:
    """Same-length cross-correlation of a ``[C_in, N]`` input."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 3 or weights.shape[1] != x.shape[0] or bias.shape != (weights.shape[0],):
        raise ValueError(f"shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    if weights.shape[2] % 2 == 0:
        raise ValueError("filter width must be odd")
    out, _ = _conv_forward(x.T[None], weights, bias, pad_indices(x.shape[1], weights.shape[2] // 2, padding))
    return out[0].T


def channel_max(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise max over the channels of a ``[C, N]`` input.

    Returns ``([1, N] values, [N] argmax)``; ties go to the lowest channel.
    """
    x = np.asarray(x)
    argmax = np.argmax(x, axis=0)
    return np.take_along_axis(x, argmax[None], axis=0), argmax


# --------------------------------------------------------------------------
# network


def curves_to_batch(curves) -> tuple[np.ndarray, bool]:
    """Stack curves into a ``[B, N, 2]`` array."""
    curves = list(curves)
    closed = {c.closed for c in curves}
    if len(closed) != 1:
        raise ValueError("a batch must not mix open and closed curves")
    return np.stack([c.points for c in curves]), closed.pop()


def _check_input(model: Model, x: np.ndarray):
    if x.ndim != 3 or x.shape[2] != model.arch.input_channels:
        raise ValueError(f"expected input [B, N, {model.arch.input_channels}], got {x.shape}")
    minimum = 2 * model.arch.receptive_radius + 1
    if x.shape[1] < minimum:
        raise ValueError(f"curve has {x.shape[1]} points; the network needs at least {minimum}")


def forward_batch(model: Model, x: np.ndarray, closed: bool = True, keep_cache: bool = False):
    """Evaluate the network on ``x`` of shape ``[B, N, C_in]``; returns ``[B, N]``.

    With ``keep_cache`` also returns the intermediates needed by
    :func:`backward_batch`.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(model, x)
    n = x.shape[1]
    arch = model.arch
    pad_idx = pad_indices(n, arch.width // 2, "wrap" if closed else "reflect")
    cache = []
    h = x
    layer = 0
    for stage in range(arch.stages):
        for _ in range(arch.convs_per_stage):
            z, cols = _conv_forward(h, model.conv_weights[layer], model.conv_biases[layer], pad_idx)
            active = z > 0
            h = np.where(active, z, 0.0)
            if keep_cache:
                cache.append(("conv", layer, cols, active))
            layer += 1
        if arch.stage_has_channel_max[stage]:
            argmax = np.argmax(h, axis=2)[..., None]
            h = np.take_along_axis(h, argmax, axis=2)
            if keep_cache:
                cache.append(("max", arch.filters, argmax))
    out = h @ model.linear_weights + model.linear_bias[0]
    if keep_cache:
        cache.append(("head", h))
        return out, (cache, pad_idx, n)
    return out


def backward_batch(model: Model, cache, output_grad: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(output_grad * output)`` for every parameter, in ``Model.params`` order."""
    layers, pad_idx, n = cache
    output_grad = np.asarray(output_grad, dtype=np.float64)
    _, h = layers[-1]
    if output_grad.shape != h.shape[:2]:
        raise ValueError(f"output gradient shape {output_grad.shape} does not match output {h.shape[:2]}")
    conv_grads = {}
    d_head_w = output_grad.reshape(-1) @ h.reshape(-1, h.shape[2])
    d_head_b = np.array([output_grad.sum()])
    dh = output_grad[:, :, None] * model.linear_weights
    for entry in reversed(layers[:-1]):
        if entry[0] == "max":
            _, channels, argmax = entry
            routed = np.zeros(dh.shape[:2] + (channels,))
            np.put_along_axis(routed, argmax, dh, axis=2)
            dh = routed
        else:
            _, layer, cols, active = entry
            dh, dw, db = _conv_backward(np.where(active, dh, 0.0), cols, model.conv_weights[layer], pad_idx, n)
            conv_grads[layer] = (dw, db)
    grads = []
    for layer in range(len(model.conv_weights)):
        grads += list(conv_grads[layer])
    return grads + [d_head_w, d_head_b]


def forward(model: Model, curve: PlanarCurve, normalize: bool = False) -> Signature:
    """Network signature of one curve (normalize first unless it already is)."""
    if normalize:
        curve = normalize_curve(curve)
    x, closed = curves_to_batch([curve])
    values = forward_batch(model, x, closed)[0]
    r = model.arch.receptive_radius
    reliable = np.ones(len(curve), dtype=bool)
    if not closed:
        reliable[:r] = reliable[len(curve) - r :] = False
    return Signature(values, "network", 0.0, reliable)


def backward(model: Model, curve: PlanarCurve, output_grad) -> list[np.ndarray]:
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != (len(curve),):
        raise ValueError(f"output gradient has shape {output_grad.shape}, expected ({len(curve)},)")
    x, closed = curves_to_batch([curve])
    _, cache = forward_batch(model, x, closed, keep_cache=True)
    return backward_batch(model, cache, output_grad[None])


# --------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class OptimizerState:
    accumulators: list[np.ndarray]
    learning_rate: float = 5e-4
    epsilon: float = 1e-8


def init_optimizer(model: Model, learning_rate: float = 5e-4, epsilon: float = 1e-8) -> OptimizerState:
    return OptimizerState([np.zeros_like(p) for p in model.params()], learning_rate, epsilon)


def adagrad_step(model: Model, grads, state: OptimizerState) -> tuple[Model, OptimizerState]:
    params = model.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match model parameters")
    new_params, new_acc = [], []
    for p, g, acc in zip(params, grads, state.accumulators):
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; aborting update")
        acc = acc + g * g
        new_acc.append(acc)
        denom = np.sqrt(acc) + state.epsilon
        # entries that have never seen a gradient stay put, even with epsilon = 0
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        new_params.append(p - state.learning_rate * step)
    return (
        Model.from_params(model.arch, new_params),
        OptimizerState(new_acc, state.learning_rate, state.epsilon),
    )


# --------------------------------------------------------------------------
# persistence


def _num_list(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in values.ravel()) + "]"


def model_to_json(model: Model) -> str:
    layers = ",\n    ".join(
        f'{{"name": {json.dumps(name)}, "shape": {json.dumps(list(p.shape))}, "values": {_num_list(p)}}}'
        for name, p in zip(model.param_names(), model.params())
    )
    return (
        "{\n"
        f'  "format_version": {FORMAT_VERSION},\n'
        f'  "architecture": {json.dumps(model.arch.to_dict())},\n'
        f'  "parameters": [\n    {layers}\n  ]\n'
        "}\n"
    )


def model_from_json(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("malformed model file: top level is not an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {doc.get('format_version')!r}")
    try:
        arch_doc = dict(doc["architecture"])
        arch_doc["stage_has_channel_max"] = tuple(arch_doc["stage_has_channel_max"])
        arch = Architecture(**arch_doc)
        params = [np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["parameters"]]
        return Model.from_params(arch, params)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None


def save_model(model: Model, path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path) -> Model:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"malformed model file {path}: {exc}") from None
    try:
        return model_from_json(text)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
