"""Dense float64 tensor kernels in NCHW layout.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every kernel
here is pure: inputs are never written to and a fresh array is returned.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
    "min": np.minimum,
}


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is identical on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def elementwise(kind: str, a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"elementwise {kind}: shape mismatch {a.shape} vs {b.shape}")
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")
    if kernel > size + 2 * pad:
        raise ValueError(f"kernel {kernel} larger than padded input {size} + 2*{pad}")
    return (size + 2 * pad - kernel) // stride + 1


def _patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) strided view; no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, kernels, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation: [N,C,H,W] * [F,C,kh,kw] -> [N,F,H',W']."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")
    conv_output_size(h, kh, stride, pad)
    conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _patches(x, kh, kw, stride)
    out = np.tensordot(cols, kernels, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',F
    out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernels, stride: int = 1, pad: int = 0, need_input_grad: bool = True):
    """Gradients of conv2d w.r.t. (input, kernels, bias).

    The input gradient is None when ``need_input_grad`` is false (first layer of a net).
    """
    grad_out, x, kernels = as_tensor(grad_out), as_tensor(x), as_tensor(kernels)
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ho, wo = grad_out.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _patches(xp, kh, kw, stride)
    grad_k = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # F,C,kh,kw
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_k, grad_b
    if stride == 1 and kh - 1 - pad >= 0 and kw == kh:
        # full correlation with the flipped, channel-transposed kernels
        flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = conv2d(grad_out, flipped, np.zeros(c), 1, kh - 1 - pad)
        return grad_x[:, :, :h, :w], grad_k, grad_b
    # N,H',W',C,kh,kw
    dcols = np.tensordot(grad_out.transpose(0, 2, 3, 1), kernels, axes=([3], [0]))
    dxp = np.zeros(xp.shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_x = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(grad_x), grad_k, grad_b


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    if kernel < 1 or stride < 1:
        raise ValueError(f"pool kernel and stride must be positive, got {kernel}, {stride}")
    if kernel > size:
        raise ValueError(f"pool kernel {kernel} exceeds spatial extent {size}")
    return (size - kernel) // stride + 1


def pool2d(x, kind: str, kernel: int, stride: int | None = None) -> np.ndarray:
    """Max or mean over kernel x kernel windows; kernel == H == W gives global pooling."""
    out, _ = pool2d_with_argmax(x, kind, kernel, stride)
    return out


def pool2d_with_argmax(x, kind: str, kernel: int, stride: int | None = None):
    """Like pool2d, also returning the in-window flat argmax for max pooling.

    Ties resolve to the lowest flat index inside the window.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"pool2d expects a 4-D input, got {x.shape}")
    stride = kernel if stride is None else stride
    ho = pool_output_size(x.shape[2], kernel, stride)
    wo = pool_output_size(x.shape[3], kernel, stride)
    win = _patches(x, kernel, kernel, stride)[:, :, :ho, :wo]
    win = win.reshape(win.shape[:4] + (kernel * kernel,))
    if kind == "max":
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, arg
    if kind == "avg":
        return win.mean(axis=-1), None
    raise ValueError(f"unknown pool kind {kind!r}")


def pool2d_backward(grad_out, input_shape, kind: str, kernel: int, stride: int | None = None,
                    argmax=None) -> np.ndarray:
    stride = kernel if stride is None else stride
    grad_out = as_tensor(grad_out)
    ho, wo = grad_out.shape[2:]
    if kind == "avg" and (ho, wo) == (1, 1) and tuple(input_shape[2:]) == (kernel, kernel):
        return np.broadcast_to(grad_out / (kernel * kernel), input_shape).copy()
    dx = np.zeros(input_shape, dtype=DTYPE)
    if kind == "avg":
        g = grad_out / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            if kind == "max":
                g = np.where(argmax == i * kernel + j, grad_out, 0.0)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g
    return dx
