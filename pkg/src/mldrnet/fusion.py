"""Aggregation of per-branch representations into one (concat, min, max, mean)."""

from __future__ import annotations

import numpy as np

FUSION_KINDS = ("concat", "min", "max", "mean")


def check_kind(kind: str) -> str:
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {', '.join(FUSION_KINDS)}")
    return kind


class Fusion:
    """Fusion layer over k same-shaped [N, d] branch tensors.

    For min/max the winning branch per element is kept in ``argselect``; ties go
    to the lowest branch index.
    """

    def __init__(self, kind: str):
        self.kind = check_kind(kind)
        self.branch_count = None
        self.shape = None
        self.argselect = None

    def forward(self, inputs) -> np.ndarray:
        inputs = [np.asarray(t, dtype=np.float64) for t in inputs]
        if len(inputs) < 2:
            raise ValueError(f"fusion needs at least 2 branches, got {len(inputs)}")
        shapes = {t.shape for t in inputs}
        if len(shapes) != 1:
            raise ValueError(f"fusion branches disagree in shape: {[t.shape for t in inputs]}")
        self.branch_count = len(inputs)
        self.shape = inputs[0].shape
        self.argselect = None
        if self.kind == "concat":
            return np.concatenate(inputs, axis=1)
        stack = np.stack(inputs)
        if self.kind == "mean":
            # offset form: identical branches reproduce their value exactly for any k
            base = inputs[0]
            return base + (stack - base).sum(axis=0) / len(inputs)
        pick = stack.argmax(axis=0) if self.kind == "max" else stack.argmin(axis=0)
        self.argselect = pick
        return np.take_along_axis(stack, pick[None], axis=0)[0]

    def backward(self, grad_out) -> list[np.ndarray]:
        if self.shape is None:
            raise RuntimeError("fusion: backward called before forward")
        k = self.branch_count
        n, d = self.shape[0], self.shape[-1]
        if self.kind == "concat":
            if grad_out.shape != (n, k * d):
                raise ValueError(f"fusion: grad_out shape {grad_out.shape} != {(n, k * d)}")
            return [grad_out[:, i * d:(i + 1) * d].copy() for i in range(k)]
        if grad_out.shape != self.shape:
            raise ValueError(f"fusion: grad_out shape {grad_out.shape} != {self.shape}")
        if self.kind == "mean":
            return [grad_out / k for _ in range(k)]
        return [np.where(self.argselect == i, grad_out, 0.0) for i in range(k)]


def fuse(inputs, kind: str) -> np.ndarray:
    return Fusion(kind).forward(inputs)
