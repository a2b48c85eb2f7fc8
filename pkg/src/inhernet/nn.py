"""Minimal feed-forward network core with exact reverse-mode gradients.

Layers operate on float64 batches with samples along the leading axis
(row-vector convention, ``y = x @ W + b``). Each layer caches what its
backward pass needs during forward; gradients accumulate into per-layer
``grads`` dicts until ``zero_grads``. A central-difference oracle
(:func:`finite_difference_grad`) provides the independent check for every
analytic gradient in the package.
"""

from __future__ import annotations

import numpy as np

from . import rng as _rng
from .errors import NumericalError, RangeError, ShapeError, StateError
from .linalg import softmax


class Layer:
    """Base layer: trainable arrays live in ``params``, their gradients in ``grads``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _require_forward(self, attr: str = "_x"):
        if getattr(self, attr, None) is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")


class DenseLayer(Layer):
    """Affine map ``y = x @ weight + bias`` with weight of shape (m, n)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        weight = np.ascontiguousarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got {weight.shape}")
        self.params["weight"] = weight
        if bias is not None:
            bias = np.ascontiguousarray(bias, dtype=np.float64)
            if bias.shape != (weight.shape[1],):
                raise ShapeError(f"bias shape {bias.shape} does not match output "
                                 f"width {weight.shape[1]}")
            self.params["bias"] = bias
        self.zero_grads()
        self._x = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params.get("bias")

    def forward(self, x):
        w = self.weight
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense layer expects input width {w.shape[0]}, "
                             f"got batch shape {x.shape}")
        self._x = x
        y = x @ w
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, grad_out):
        self._require_forward()
        x = self._x
        self.grads["weight"] += x.T @ grad_out
        if "bias" in self.params:
            self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.weight.T


class ReluLayer(Layer):
    """Rectifier with subgradient 0 at the origin."""

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        self._require_forward("_mask")
        return np.where(self._mask, grad_out, 0.0)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0 or (size + 2 * padding - k) % stride != 0:
        raise ShapeError(f"conv geometry invalid: size={size} kernel={k} "
                         f"stride={stride} padding={padding}")
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (B, C, H, W) into (B, OH*OW, C*kh*kw) patch rows."""
    b, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
           padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    b, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    six = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += six[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


class Conv2DLayer(Layer):
    """2-D convolution via im2col + matmul.

    Kernel shape is (n_filters, in_channels, kh, kw); inputs are
    (batch, in_channels, height, width).
    """

    def __init__(self, kernel: np.ndarray, stride: int = 1, padding: int = 0,
                 bias: np.ndarray | None = None):
        super().__init__()
        kernel = np.ascontiguousarray(kernel, dtype=np.float64)
        if kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {kernel.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"invalid stride={stride} padding={padding}")
        self.params["kernel"] = kernel
        if bias is not None:
            bias = np.ascontiguousarray(bias, dtype=np.float64)
            if bias.shape != (kernel.shape[0],):
                raise ShapeError(f"conv bias shape {bias.shape} does not match "
                                 f"{kernel.shape[0]} filters")
            self.params["bias"] = bias
        self.stride = stride
        self.padding = padding
        self.zero_grads()
        self._x = None
        self._cols = None

    @property
    def kernel(self) -> np.ndarray:
        return self.params["kernel"]

    def forward(self, x):
        k = self.kernel
        if x.ndim != 4 or x.shape[1] != k.shape[1]:
            raise ShapeError(f"conv layer expects (B, {k.shape[1]}, H, W), "
                             f"got {x.shape}")
        n, _, kh, kw = k.shape
        b = x.shape[0]
        oh = conv_output_size(x.shape[2], kh, self.stride, self.padding)
        ow = conv_output_size(x.shape[3], kw, self.stride, self.padding)
        self._x = x
        self._cols = im2col(x, kh, kw, self.stride, self.padding)
        flat = self._cols @ k.reshape(n, -1).T            # (B, OH*OW, N)
        if "bias" in self.params:
            flat = flat + self.params["bias"]
        return flat.transpose(0, 2, 1).reshape(b, n, oh, ow)

    def backward(self, grad_out):
        self._require_forward()
        k = self.kernel
        n, _, kh, kw = k.shape
        b = grad_out.shape[0]
        gflat = grad_out.reshape(b, n, -1).transpose(0, 2, 1)   # (B, OH*OW, N)
        self.grads["kernel"] += np.einsum("bpn,bpk->nk", gflat, self._cols,
                                          optimize=True).reshape(k.shape)
        if "bias" in self.params:
            self.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
        gcols = gflat @ k.reshape(n, -1)
        return col2im(gcols, self._x.shape, kh, kw, self.stride, self.padding)


class Network:
    """An ordered stack of layers with a shared forward/backward walk."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}") from exc
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def param_items(self) -> dict[str, np.ndarray]:
        """Every trainable array, keyed ``{layer_index}.{name}``."""
        return {f"{i}.{k}": p
                for i, layer in enumerate(self.layers)
                for k, p in layer.params.items()}

    def grad_items(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": g
                for i, layer in enumerate(self.layers)
                for k, g in layer.grads.items()}

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def clone(self) -> "Network":
        """Deep parameter snapshot; safe for concurrent read-only evaluation."""
        import copy
        return copy.deepcopy(self)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over every entry; returns (loss, grad wrt pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the true class.

    Returns (loss, grad wrt logits); the gradient is
    (softmax - one_hot) / batch.
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise RangeError(f"label out of range [0, {k}): "
                         f"min={labels.min()} max={labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def finite_difference_grad(net: Network, loss_fn, x: np.ndarray, y: np.ndarray,
                           step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate for every trainable scalar.

    ``loss_fn(pred, y)`` must return ``(loss, grad)``; only the loss value
    is used here, keeping this oracle independent of every analytic
    backward pass it checks.
    """
    if step <= 0:
        raise RangeError(f"finite-difference step must be positive, got {step}")
    out: dict[str, np.ndarray] = {}
    for key, p in net.param_items().items():
        g = np.zeros_like(p)
        # Index assignment (not a flattened view) so any memory layout works.
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_fn(net.forward(x), y)[0]
            p[idx] = orig - step
            lm = loss_fn(net.forward(x), y)[0]
            p[idx] = orig
            g[idx] = (lp - lm) / (2.0 * step)
        out[key] = g
    return out


def kaiming_uniform(shape, fan_in: int, gen: np.random.Generator) -> np.ndarray:
    """He-style uniform init on (-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape)


def make_mlp(dims: list[int], seed: int, bias: bool = True) -> Network:
    """Fully connected ReLU network with the given layer widths.

    Weights draw from the Kaiming-uniform distribution on the counter-based
    stream (seed, STREAM_INIT, layer_index); biases start at zero.
    """
    if len(dims) < 2:
        raise ShapeError("an MLP needs at least an input and an output width")
    layers: list[Layer] = []
    for i, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
        gen = _rng.philox(seed, _rng.STREAM_INIT, i)
        w = kaiming_uniform((m, n), fan_in=m, gen=gen)
        layers.append(DenseLayer(w, np.zeros(n) if bias else None))
        if i < len(dims) - 2:
            layers.append(ReluLayer())
    return Network(layers)
