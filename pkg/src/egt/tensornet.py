"""Minimal dense feedforward network stack.

Implements the closed layer vocabulary used by the relevance engine and
the episodic trainer: ``linear``, ``conv2d``, ``relu``, ``maxpool2d``,
``avgpool2d``, ``flatten``.  A forward pass can be recorded into a
:class:`ForwardTrace` that keeps every per-layer input and output, and
both the gradient pass and the relevance pass replay that trace instead
of touching global state.

All arithmetic is float64 numpy.  Activations are row-major, shaped
``(C, H, W)`` for image-like tensors and ``(D,)`` for vectors, with an
optional leading batch axis on every public entry point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

Array = np.ndarray

LAYER_KINDS = ("linear", "conv2d", "relu", "maxpool2d", "avgpool2d", "flatten")


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Array:
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ContractError(message)


class Layer:
    """Base class: stateless apart from parameters and momentum buffers."""

    kind: str = "?"

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: Array) -> Array:
        """Apply the layer to a batched input ``(B, *in_shape)``."""
        raise NotImplementedError

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, dict[str, Array] | None]:
        """Return ``(grad_in, param_grads)`` for one recorded application.

        ``param_grads`` is summed over the batch axis; ``None`` for
        parameter-free layers.
        """
        raise NotImplementedError

    def params(self) -> dict[str, Array]:
        return {}


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight: Array, bias: Array):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        _require(weight.ndim == 2, f"linear weight must be 2-d, got {weight.shape}")
        _require(bias.shape == (weight.shape[0],),
                 f"linear bias shape {bias.shape} does not match weight {weight.shape}")
        self.weight = weight
        self.bias = bias
        self.velocity: dict[str, Array] = {}

    @classmethod
    def he_init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Linear":
        return cls(he_uniform((out_dim, in_dim), in_dim, rng), np.zeros(out_dim))

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        _require(in_shape == (self.weight.shape[1],),
                 f"expects input ({self.weight.shape[1]},), got {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x: Array) -> Array:
        return x @ self.weight.T + self.bias

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, dict[str, Array]]:
        grad_in = grad_out @ self.weight
        return grad_in, {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}

    def params(self) -> dict[str, Array]:
        return {"weight": self.weight, "bias": self.bias}


class Conv2d(Layer):
    """2-d convolution (cross-correlation) via window unrolling.

    Weight layout ``(out_ch, in_ch, kh, kw)``; zero padding; square or
    rectangular kernels; stride >= 1.  The unrolled-window formulation
    keeps forward, gradient, and relevance passes on the same code path.
    """

    kind = "conv2d"

    def __init__(self, weight: Array, bias: Array, stride: int = 1, padding: int = 0):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        _require(weight.ndim == 4, f"conv2d weight must be 4-d, got {weight.shape}")
        _require(bias.shape == (weight.shape[0],),
                 f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
        _require(stride >= 1, f"conv2d stride must be >= 1, got {stride}")
        _require(padding >= 0, f"conv2d padding must be >= 0, got {padding}")
        self.weight = weight
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        self.velocity: dict[str, Array] = {}

    @classmethod
    def he_init(cls, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                stride: int = 1, padding: int = 0) -> "Conv2d":
        fan_in = in_ch * kernel * kernel
        weight = he_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng)
        return cls(weight, np.zeros(out_ch), stride=stride, padding=padding)

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        _require(len(in_shape) == 3, f"expects (C, H, W) input, got {in_shape}")
        o, c, kh, kw = self.weight.shape
        _require(in_shape[0] == c, f"expects {c} input channels, got {in_shape[0]}")
        h = in_shape[1] + 2 * self.padding
        w = in_shape[2] + 2 * self.padding
        _require(h >= kh and w >= kw,
                 f"kernel {kh}x{kw} larger than padded input {h}x{w}")
        return (o, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def _pad(self, x: Array) -> Array:
        if self.padding == 0:
            return x
        p = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _cols(self, x: Array, oh: int, ow: int) -> Array:
        """Unroll receptive fields to ``(B, C*kh*kw, oh*ow)``."""
        xp = self._pad(x)
        b, c = xp.shape[:2]
        _, _, kh, kw = self.weight.shape
        s = self.stride
        win = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                win[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
        return win.reshape(b, c * kh * kw, oh * ow)

    def _fold(self, dcols: Array, in_shape: tuple[int, ...]) -> Array:
        """Scatter-add column gradients back onto the (padded) input."""
        b = dcols.shape[0]
        c, h, w = in_shape
        _, _, kh, kw = self.weight.shape
        s, p = self.stride, self.padding
        oh, ow = self._oh_ow(in_shape)
        win = dcols.reshape(b, c, kh, kw, oh, ow)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += win[:, :, i, j]
        if p == 0:
            return dxp
        return dxp[:, :, p:-p, p:-p]

    def _oh_ow(self, in_shape: tuple[int, ...]) -> tuple[int, int]:
        _, oh, ow = self.out_shape(in_shape)
        return oh, ow

    def forward(self, x: Array) -> Array:
        o = self.weight.shape[0]
        oh, ow = self._oh_ow(x.shape[1:])
        cols = self._cols(x, oh, ow)
        y = np.matmul(self.weight.reshape(o, -1), cols)
        y += self.bias[:, None]
        return y.reshape(x.shape[0], o, oh, ow)

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, dict[str, Array]]:
        b, o = grad_out.shape[:2]
        g2 = grad_out.reshape(b, o, -1)
        cols = self._cols(x, grad_out.shape[2], grad_out.shape[3])
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        grads = {"weight": dw.reshape(self.weight.shape), "bias": g2.sum(axis=(0, 2))}
        return self.grad_input(grad_out, x.shape[1:]), grads

    def grad_input(self, grad_out: Array, in_shape: tuple[int, ...],
                   weight: Array | None = None) -> Array:
        """Input gradient of the convolution for a given output cotangent.

        ``weight`` overrides the stored kernel; the relevance pass uses
        this to push sign-split weights through the same fold.
        """
        w = self.weight if weight is None else weight
        b, o = grad_out.shape[:2]
        g2 = grad_out.reshape(b, o, -1)
        dcols = np.matmul(w.reshape(o, -1).T, g2)
        return self._fold(dcols, in_shape)

    def params(self) -> dict[str, Array]:
        return {"weight": self.weight, "bias": self.bias}


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: Array) -> Array:
        return np.maximum(x, 0.0)

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, None]:
        return grad_out * (x > 0.0), None


def _pool_windows(x: Array, kernel: int, stride: int, oh: int, ow: int) -> Array:
    """Stack pooling windows along axis 2: ``(B, C, k*k, oh, ow)``."""
    b, c = x.shape[:2]
    win = np.empty((b, c, kernel * kernel, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            win[:, :, i * kernel + j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return win


def _unpool_windows(win: Array, kernel: int, stride: int, in_shape: tuple[int, ...]) -> Array:
    b = win.shape[0]
    c, h, w = in_shape
    oh, ow = win.shape[3], win.shape[4]
    dx = np.zeros((b, c, h, w))
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += win[:, :, i * kernel + j]
    return dx


class _Pool(Layer):
    def __init__(self, kernel: int, stride: int | None = None):
        _require(kernel >= 1, f"pool kernel must be >= 1, got {kernel}")
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else int(kernel)
        _require(self.stride >= 1, f"pool stride must be >= 1, got {self.stride}")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        _require(len(in_shape) == 3, f"expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k, s = self.kernel, self.stride
        _require(h >= k and w >= k, f"pool kernel {k} larger than input {h}x{w}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def windows(self, x: Array) -> Array:
        _, oh, ow = self.out_shape(x.shape[1:])
        return _pool_windows(x, self.kernel, self.stride, oh, ow)


class MaxPool2d(_Pool):
    kind = "maxpool2d"

    def forward(self, x: Array) -> Array:
        return self.windows(x).max(axis=2)

    def winner_index(self, x: Array) -> Array:
        """Flat within-window index of the max; ties pick the lowest index."""
        return self.windows(x).argmax(axis=2)

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, None]:
        win = np.zeros_like(self.windows(x))
        idx = self.winner_index(x)
        np.put_along_axis(win, idx[:, :, None], grad_out[:, :, None], axis=2)
        return _unpool_windows(win, self.kernel, self.stride, x.shape[1:]), None


class AvgPool2d(_Pool):
    kind = "avgpool2d"

    def forward(self, x: Array) -> Array:
        return self.windows(x).mean(axis=2)

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, None]:
        k2 = self.kernel * self.kernel
        win = np.broadcast_to(grad_out[:, :, None] / k2, grad_out.shape[:2] + (k2,) + grad_out.shape[2:])
        return _unpool_windows(win, self.kernel, self.stride, x.shape[1:]), None


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(in_shape)),)

    def forward(self, x: Array) -> Array:
        return x.reshape(x.shape[0], -1)

    def backward(self, x: Array, y: Array, grad_out: Array) -> tuple[Array, None]:
        return grad_out.reshape(x.shape), None


@dataclass
class LayerTrace:
    """Recorded input and output of one layer application (batched)."""
    input: Array
    output: Array


@dataclass
class ForwardTrace:
    """Everything the gradient and relevance passes need to replay a forward pass."""
    entries: list[LayerTrace]
    batched: bool

    @property
    def output(self) -> Array:
        out = self.entries[-1].output
        return out if self.batched else out[0]


class Network:
    """An ordered stack of layers with static shape checking.

    Shapes are chained once at construction; a mismatch raises
    :class:`ContractError` naming the offending layer.  Parameters only
    change through :func:`sgd_step`.
    """

    def __init__(self, input_shape: tuple[int, ...], layers: list[Layer]):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except ContractError as err:
                raise ContractError(f"layer {i} ({layer.kind}): {err}") from None
        self.shapes = shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def _to_batched(self, x: Array) -> tuple[Array, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], False
        if x.shape[1:] == self.input_shape and x.ndim == len(self.input_shape) + 1:
            return x, True
        raise ContractError(
            f"input shape {x.shape} does not match network input {self.input_shape}")

    def forward(self, x: Array) -> Array:
        return self._run(x, record=False)[0]

    def forward_recorded(self, x: Array) -> tuple[Array, ForwardTrace]:
        out, trace = self._run(x, record=True)
        return out, trace

    def _run(self, x: Array, record: bool) -> tuple[Array, ForwardTrace | None]:
        x, batched = self._to_batched(x)
        entries: list[LayerTrace] = []
        for layer in self.layers:
            y = layer.forward(x)
            if record:
                entries.append(LayerTrace(x, y))
            x = y
        if not np.isfinite(x).all():
            raise NumericError("network forward produced non-finite values")
        out = x if batched else x[0]
        return out, (ForwardTrace(entries, batched) if record else None)

    def backward_grad(self, trace: ForwardTrace, grad_out: Array) -> tuple[Array, list[dict[str, Array] | None]]:
        """Propagate an output cotangent back through a recorded pass.

        Returns the input gradient (batched like the traced input) and
        one parameter-gradient dict per layer (``None`` where the layer
        has no parameters), summed over the batch.
        """
        g = np.asarray(grad_out, dtype=np.float64)
        if not trace.batched:
            g = g[None]
        expected = self.entries_output_shape(trace)
        if g.shape != expected:
            raise ContractError(f"grad_out shape {g.shape} does not match traced output {expected}")
        param_grads: list[dict[str, Array] | None] = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            entry = trace.entries[i]
            g, pg = self.layers[i].backward(entry.input, entry.output, g)
            param_grads[i] = pg
        if not np.isfinite(g).all():
            raise NumericError("backward pass produced non-finite input gradient")
        return (g if trace.batched else g[0]), param_grads

    @staticmethod
    def entries_output_shape(trace: ForwardTrace) -> tuple[int, ...]:
        return trace.entries[-1].output.shape

    def param_layers(self) -> list[tuple[int, Layer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.params()]

    def copy_params_from(self, other: "Network") -> None:
        for (_, mine), (_, theirs) in zip(self.param_layers(), other.param_layers()):
            for name, arr in mine.params().items():
                arr[...] = theirs.params()[name]


def sgd_step(net: Network, param_grads: list[dict[str, Array] | None],
             lr: float, momentum: float) -> None:
    """In-place momentum SGD: ``v <- momentum*v + g``, ``p <- p - lr*v``.

    Momentum buffers live on the layers and persist across calls.  A
    non-finite gradient aborts before any parameter is touched.
    """
    if len(param_grads) != len(net.layers):
        raise ContractError(
            f"expected {len(net.layers)} gradient entries, got {len(param_grads)}")
    for i, (layer, grads) in enumerate(zip(net.layers, param_grads)):
        if not layer.params():
            continue
        if grads is None:
            raise ContractError(f"layer {i} ({layer.kind}): missing parameter gradients")
        for name in layer.params():
            g = grads[name]
            if not np.isfinite(g).all():
                raise NumericError(
                    f"non-finite gradient for layer {i} ({layer.kind}) parameter '{name}'")
    for layer, grads in zip(net.layers, param_grads):
        if not layer.params():
            continue
        for name, arr in layer.params().items():
            buf = layer.velocity.get(name)
            if buf is None:
                buf = np.zeros_like(arr)
                layer.velocity[name] = buf
            buf *= momentum
            buf += grads[name]
            arr -= lr * buf


# --- layer descriptions, used by the checkpoint header -------------------

def describe_layer(layer: Layer) -> str:
    if isinstance(layer, Linear):
        return f"linear in={layer.weight.shape[1]} out={layer.weight.shape[0]}"
    if isinstance(layer, Conv2d):
        o, c, kh, kw = layer.weight.shape
        return (f"conv2d in={c} out={o} kernel={kh}x{kw} "
                f"stride={layer.stride} padding={layer.padding}")
    if isinstance(layer, (MaxPool2d, AvgPool2d)):
        return f"{layer.kind} kernel={layer.kernel} stride={layer.stride}"
    if isinstance(layer, (ReLU, Flatten)):
        return layer.kind
    raise ContractError(f"cannot describe layer of kind {layer.kind!r}")


def layer_from_description(text: str) -> Layer:
    """Rebuild a layer (zero parameters) from :func:`describe_layer` output."""
    parts = text.split()
    kind, kv = parts[0], dict(p.split("=", 1) for p in parts[1:])
    if kind == "linear":
        return Linear(np.zeros((int(kv["out"]), int(kv["in"]))), np.zeros(int(kv["out"])))
    if kind == "conv2d":
        kh, kw = (int(d) for d in kv["kernel"].split("x"))
        weight = np.zeros((int(kv["out"]), int(kv["in"]), kh, kw))
        return Conv2d(weight, np.zeros(int(kv["out"])),
                      stride=int(kv["stride"]), padding=int(kv["padding"]))
    if kind == "maxpool2d":
        return MaxPool2d(int(kv["kernel"]), int(kv["stride"]))
    if kind == "avgpool2d":
        return AvgPool2d(int(kv["kernel"]), int(kv["stride"]))
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise ContractError(f"unknown layer kind {kind!r}")
