"""Layers with explicit forward/backward, the softmax cross-entropy head and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore
from .ndcore import DTYPE


class Layer:
    """Base layer.

    ``params`` and ``grads`` are dicts of same-shaped float64 arrays.  Gradients
    are accumulated by ``backward`` and never applied here.
    """

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = False
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]

    def kink_signature(self) -> bytes:
        return b""

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    def _check_grad_shape(self, grad_out, expected):
        if grad_out.shape != expected:
            raise ValueError(f"{self.kind}: grad_out shape {grad_out.shape} != output shape {expected}")

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{k}={v.shape}' for k, v in self.params.items())})"


def fan_in_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None, input_grad=True):
        super().__init__()
        self.stride, self.pad, self.kernel = stride, pad, kernel
        self.input_grad = input_grad
        shape = (out_ch, in_ch, kernel, kernel)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = fan_in_uniform(rng, shape, in_ch * kernel * kernel)
        self.params = {"weight": w, "bias": np.zeros(out_ch)}
        self.zero_grad()

    def forward(self, x):
        w = self.params["weight"]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv: input shape {x.shape} incompatible with kernels {w.shape}")
        self._cache = x
        return ndcore.conv2d(x, w, self.params["bias"], self.stride, self.pad)

    def backward(self, grad_out):
        x = self._cached()
        gx, gw, gb = ndcore.conv2d_backward(grad_out, x, self.params["weight"], self.stride,
                                            self.pad, need_input_grad=self.input_grad)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out):
        mask = self._cached()
        self._check_grad_shape(grad_out, mask.shape)
        return np.where(mask, grad_out, 0.0)

    def kink_signature(self):
        return b"" if self._cache is None else np.packbits(self._cache).tobytes()


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def forward(self, x):
        out, arg = ndcore.pool2d_with_argmax(x, "max", self.kernel, self.stride)
        self._cache = (x.shape, arg)
        return out

    def backward(self, grad_out):
        shape, arg = self._cached()
        self._check_grad_shape(grad_out, arg.shape)
        return ndcore.pool2d_backward(grad_out, shape, "max", self.kernel, self.stride, arg)

    def kink_signature(self):
        return b"" if self._cache is None else self._cache[1].tobytes()


class AvgPool2d(Layer):
    """Average pooling; ``kernel=None`` pools globally over the whole spatial extent."""

    kind = "avgpool"

    def __init__(self, kernel=None, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"avgpool: expected 4-D input, got {x.shape}")
        k = self.kernel
        if k is None:
            if x.shape[2] != x.shape[3]:
                raise ValueError(f"avgpool: global pooling needs a square map, got {x.shape}")
            k = x.shape[2]
        out = ndcore.pool2d(x, "avg", k, self.stride or k)
        self._cache = (x.shape, k, out.shape)
        return out

    def backward(self, grad_out):
        shape, k, out_shape = self._cached()
        self._check_grad_shape(grad_out, out_shape)
        return ndcore.pool2d_backward(grad_out, shape, "avg", k, self.stride or k)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        shape = self._cached()
        return grad_out.reshape(shape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        shape = (in_features, out_features)
        w = np.zeros(shape) if rng is None else fan_in_uniform(rng, shape, in_features)
        self.params = {"weight": w, "bias": np.zeros(out_features)}
        self.zero_grad()

    def forward(self, x):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"linear: input shape {x.shape} incompatible with weight {w.shape}")
        self._cache = x
        return ndcore.matmul(x, w) + self.params["bias"]

    def backward(self, grad_out):
        x = self._cached()
        self._check_grad_shape(grad_out, (x.shape[0], self.params["weight"].shape[1]))
        self.grads["weight"] += x.T @ grad_out
        self.grads["bias"] += grad_out.sum(axis=0)
        return grad_out @ self.params["weight"].T


class Dropout(Layer):
    """Inverted dropout.  Identity unless ``training`` is set."""

    kind = "dropout"

    def __init__(self, rate, rng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._cache = None, x.shape
            return x.copy()
        keep = self.rng.random(x.shape) >= self.rate
        scale = np.where(keep, 1.0 / (1.0 - self.rate), 0.0)
        self._cache = scale, x.shape
        return x * scale

    def backward(self, grad_out):
        scale, shape = self._cached()
        self._check_grad_shape(grad_out, shape)
        return grad_out.copy() if scale is None else grad_out * scale


@dataclass
class LossOutput:
    loss: float
    probs: np.ndarray
    grad_logits: np.ndarray


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> LossOutput:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = ndcore.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"logits must be [N, n] with N >= 1, got {logits.shape}")
    n_batch, n_classes = logits.shape
    if labels.shape != (n_batch,):
        raise ValueError(f"expected {n_batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range 0..{n_classes - 1}: {labels.tolist()}")
    rows = np.arange(n_batch)
    top = logits.argmax(axis=1)
    z = logits - logits[rows, top][:, None]
    # log-sum-exp as log1p over the non-max terms keeps tiny losses exact
    e = np.exp(z)
    e[rows, top] = 0.0
    log_norm = np.log1p(e.sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n_batch
    return LossOutput(loss, probs, grad)


def _objective(target, x, labels, projection):
    out = target.forward(x)
    if isinstance(out, tuple):
        out = out[1]
    if labels is not None:
        res = softmax_cross_entropy(out, labels)
        return res.loss, res.grad_logits
    return float(np.sum(out * projection)), projection


def grad_check_report(target, x, labels=None, epsilon=1e-5, *, max_per_tensor=None,
                      check_input=True, seed=0, floor=1e-6) -> dict[str, float]:
    """Central-difference check of every parameter (and input) gradient of ``target``.

    ``target`` is a Layer or a Model.  With ``labels`` the objective is the softmax
    cross-entropy of its output; without, a fixed random projection of the output.
    ``max_per_tensor`` samples that many coordinates per tensor instead of all.
    Coordinates whose ReLU masks or max-pool routing change under the +/-epsilon
    probe are skipped, since the objective is not differentiable there.

    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |loss|))``.  Round-off
    in a central difference grows with the loss (about 1e-10 per unit of loss at
    epsilon 1e-5), so gradients below the scaled floor are compared in absolute terms.

    Returns the maximum relative error per named tensor.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    x = np.array(x, dtype=DTYPE)
    rng = np.random.default_rng(seed)
    projection = None
    if labels is None:
        out = target.forward(x)
        out = out[1] if isinstance(out, tuple) else out
        projection = rng.standard_normal(out.shape)

    if check_input and hasattr(target, "input_grad"):
        target.input_grad = True
    target.zero_grad()
    f0, upstream = _objective(target, x, labels, projection)
    denom_floor = floor * max(1.0, abs(f0))
    base_sig = target.kink_signature()
    gx = target.backward(upstream)

    tensors = [(name, p, g.copy()) for name, p, g in target.named_parameters()]
    if check_input:
        if gx is None:
            raise ValueError("target did not return an input gradient")
        tensors.append(("input", x, gx))

    def probe(arr, idx):
        old = arr[idx]
        arr[idx] = old + epsilon
        f_plus, _ = _objective(target, x, labels, projection)
        sig_plus = target.kink_signature()
        arr[idx] = old - epsilon
        f_minus, _ = _objective(target, x, labels, projection)
        sig_minus = target.kink_signature()
        arr[idx] = old
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while probing index {idx}")
        if sig_plus != base_sig or sig_minus != base_sig:
            return None
        return (f_plus - f_minus) / (2 * epsilon)

    report = {}
    for name, arr, analytic in tensors:
        flat = range(arr.size)
        if max_per_tensor is not None and arr.size > max_per_tensor:
            flat = rng.choice(arr.size, size=max_per_tensor, replace=False)
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(int(k), arr.shape)
            numeric = probe(arr, idx)
            if numeric is None:
                continue
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, err)
        report[name] = worst
    # leave caches consistent with the unperturbed parameters
    _objective(target, x, labels, projection)
    return report


def grad_check(target, x, labels=None, epsilon=1e-5, **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return max(grad_check_report(target, x, labels, epsilon, **kwargs).values(), default=0.0)
