"""Minimal reverse-mode differentiation for small feedforward nets.

Everything is dense numpy. A forward pass through a sequential network
records one node per primitive op on a Tape; a single backward pass then
yields gradients with respect to both the flat parameter vector and the
network input. Only the ops needed by the model zoo exist: linear, relu,
2-D convolution, 2x2 max-pooling and flatten.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


class TapeConsumedError(RuntimeError):
    """Raised when a tape is asked for a second backward pass."""


class ShapeMismatchError(ValueError):
    """Raised when an input does not match the expected dimensions."""


class Tape:
    """Ordered record of primitive ops; supports exactly one backward pass.

    Each node stores a backward closure mapping the upstream gradient to
    (gradient w.r.t. the node input, list of per-parameter gradients).
    Nodes are replayed in reverse order, once.
    """

    def __init__(self) -> None:
        self._nodes: list[Callable] = []
        self._consumed = False

    def record(self, backward: Callable) -> None:
        self._nodes.append(backward)

    def run_backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (flat parameter gradient, gradient w.r.t. the input)."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        self._consumed = True
        grads_per_node: list[list[np.ndarray]] = []
        g = np.asarray(upstream, dtype=DTYPE)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        for backward in reversed(self._nodes):
            g, pgrads = backward(g)
            grads_per_node.append(pgrads)
        grads_per_node.reverse()
        flat = [p.ravel() for pgrads in grads_per_node for p in pgrads]
        param_grad = np.concatenate(flat) if flat else np.zeros(0, dtype=DTYPE)
        return param_grad, (g[0] if squeeze else g)


def grad_params(tape: Tape, upstream: np.ndarray) -> np.ndarray:
    """Flat gradient w.r.t. all recorded parameters. Consumes the tape."""
    return tape.run_backward(upstream)[0]


def grad_input(tape: Tape, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the network input. Consumes the tape."""
    return tape.run_backward(upstream)[1]


def _check_finite(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {name}")
    return a


# ---------------------------------------------------------------------------
# Primitive ops. Inputs are batched: 2-D (n, features) or 4-D (n, c, h, w).
# Each op optionally records its backward closure on the tape.
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray, tape: Tape | None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(
            f"linear: input has shape {x.shape}, weight expects {w.shape[0]} features"
        )
    out = x @ w + b
    if tape is not None:
        def backward(g: np.ndarray):
            gw = x.T @ g
            gb = g.sum(axis=0)
            gx = g @ w.T
            return gx, [gw, gb]
        tape.record(backward)
    return out


def relu(x: np.ndarray, tape: Tape | None) -> np.ndarray:
    out = np.maximum(x, 0.0)
    if tape is not None:
        # subgradient at 0 is 0
        mask = x > 0.0
        def backward(g: np.ndarray):
            return g * mask, []
        tape.record(backward)
    return out


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, c, h, w) -> (n, oh, ow, c*kh*kw) patches for a valid convolution."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(n, oh, ow, c, kh, kw), strides=(s0, s2, s3, s1, s2, s3)
    )
    return patches.reshape(n, oh, ow, c * kh * kw)


def conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray, tape: Tape | None) -> np.ndarray:
    """Valid 2-D convolution, stride 1. k has shape (out_c, in_c, kh, kw)."""
    if x.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: input has shape {x.shape}, kernel expects {k.shape[1]} channels"
        )
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    if h < kh or w < kw:
        raise ShapeMismatchError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    cols = _im2col(x, kh, kw)                      # (n, oh, ow, c*kh*kw)
    kmat = k.reshape(oc, -1)                       # (oc, c*kh*kw)
    out = cols @ kmat.T + b                        # (n, oh, ow, oc)
    out = out.transpose(0, 3, 1, 2)
    if tape is not None:
        oh, ow = out.shape[2], out.shape[3]
        def backward(g: np.ndarray):
            gm = g.transpose(0, 2, 3, 1)           # (n, oh, ow, oc)
            gk = np.einsum("nxyo,nxyp->op", gm, cols).reshape(k.shape)
            gb = gm.sum(axis=(0, 1, 2))
            gcols = gm @ kmat                      # (n, oh, ow, c*kh*kw)
            gx = np.zeros_like(x)
            gcols = gcols.reshape(n, oh, ow, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh, j:j + ow] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            return gx, [gk, gb]
        tape.record(backward)
    return out


def maxpool2(x: np.ndarray, tape: Tape | None) -> np.ndarray:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    full_shape = x.shape
    n, c, h, w = full_shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(f"maxpool2: spatial dims too small, got {h}x{w}")
    h, w = h - h % 2, w - w % 2
    x = x[:, :, :h, :w]
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))
    if tape is not None:
        # ties broken toward the first max in raster order, deterministically
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        def backward(g: np.ndarray):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            gx = gx.reshape(n, c, h, w)
            if (h, w) != full_shape[2:]:
                padded = np.zeros(full_shape, dtype=gx.dtype)
                padded[:, :, :h, :w] = gx
                gx = padded
            return gx, []
        tape.record(backward)
    return out


def flatten(x: np.ndarray, tape: Tape | None) -> np.ndarray:
    shape = x.shape
    out = x.reshape(shape[0], -1)
    if tape is not None:
        def backward(g: np.ndarray):
            return g.reshape(shape), []
        tape.record(backward)
    return out
