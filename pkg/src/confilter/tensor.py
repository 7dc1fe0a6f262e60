"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: exactly what a compact MLP/CNN
classifier needs (matmul, 2-D cross-correlation, pooling, pointwise
nonlinearities, softmax cross-entropy, and the glue ops around them).
Everything is double precision and single-threaded so that repeated runs
with identical inputs are bit-identical.

Broadcasting is restricted to bias addition; there are no dynamic shapes
and no higher-order derivatives (a second ``backward`` on the same loss
raises instead of silently accumulating).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import FormatError, GraphError, NumericFault, ShapeError

__all__ = [
    "Tensor",
    "matmul",
    "add_bias",
    "add_channel_bias",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_cross_entropy",
    "flatten_batch",
    "tensor_sum",
    "scale",
    "select_logit",
    "CheckReport",
    "finite_difference_check",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]


def _as_f64(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values produced in {what}")


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is always C-contiguous (row-major); ``grad`` has the same shape
    and is allocated as zeros whenever ``requires_grad`` is set. Tensors
    produced by an operation remember their parents and a backward rule so
    ``backward()`` on a scalar loss can fill every reachable gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_ran = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- gradient bookkeeping --------------------------------------------------

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Fills ``grad`` for every requires_grad tensor reachable through the
        graph. Calling it twice on the same loss is an error: the pipeline
        never needs double backward and silent accumulation hides bugs.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor detached from any differentiable graph")
        if self._backward_ran:
            raise GraphError("backward already invoked on this loss")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()
        self._backward_ran = True


def _from_op(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    _check_finite(data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    out._op = op
    if requires:
        out._parents = tuple(parents)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        _check_finite(g, "gradient")
        t.grad += g.reshape(t.data.shape)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _from_op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)
        out._backward_fn = _bw
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[N,D] + b[D]. The only broadcasting the engine allows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    out = _from_op(x.data + b.data[None, :], (x, b), "add_bias")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad)
            _accum(b, out.grad.sum(axis=0))
        out._backward_fn = _bw
    return out


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias: x[N,C,H,W] + b[C]."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_channel_bias shape mismatch: {x.shape} + {b.shape}")
    out = _from_op(x.data + b.data[None, :, None, None], (x, b), "add_channel_bias")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad)
            _accum(b, out.grad.sum(axis=(0, 2, 3)))
        out._backward_fn = _bw
    return out


# -- convolution and pooling -----------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d output {axis} is not a positive integer: "
            f"(({size} + 2*{padding} - {k}) / {stride}) + 1"
        )
    return span // stride + 1


def _im2col_indices(C: int, kh: int, kw: int, h_out: int, w_out: int, stride: int):
    i0 = np.tile(np.repeat(np.arange(kh), kw), C)
    j0 = np.tile(np.arange(kw), kh * C)
    i1 = stride * np.repeat(np.arange(h_out), w_out)
    j1 = stride * np.tile(np.arange(w_out), h_out)
    i = i0[:, None] + i1[None, :]
    j = j0[:, None] + j1[None, :]
    k = np.repeat(np.arange(C), kh * kw)[:, None]
    return k, i, j


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation (no kernel flip).

    x[N,C,H,W] with kernel[F,C,kh,kw] -> out[N,F,H',W']. Implemented with
    im2col so the heavy lifting is a single matmul; the nested-loop version
    lives in the tests as the independent oracle.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    N, C, H, W = x.shape
    F, _, kh, kw = kernel.shape
    h_out = _conv_out_size(H, kh, stride, padding, "height")
    w_out = _conv_out_size(W, kw, stride, padding, "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k, i, j = _im2col_indices(C, kh, kw, h_out, w_out, stride)
    cols = xp[:, k, i, j]                                  # (N, C*kh*kw, L)
    w2 = kernel.data.reshape(F, -1)                        # (F, C*kh*kw)
    out_data = np.einsum("fc,ncl->nfl", w2, cols).reshape(N, F, h_out, w_out)

    out = _from_op(out_data, (x, kernel), "conv2d")
    if out.requires_grad:
        hp, wp = H + 2 * padding, W + 2 * padding

        def _bw():
            g = out.grad.reshape(N, F, -1)                 # (N, F, L)
            _accum(kernel, np.einsum("nfl,ncl->fc", g, cols).reshape(kernel.shape))
            if x.requires_grad:
                dcols = np.einsum("fc,nfl->ncl", w2, g)    # (N, C*kh*kw, L)
                flat = (k * (hp * wp) + i * wp + j).reshape(-1)       # (CKK*L,)
                offsets = np.arange(N)[:, None] * (C * hp * wp)
                idx = (offsets + flat[None, :]).reshape(-1)
                dxp = np.bincount(idx, weights=dcols.reshape(-1), minlength=N * C * hp * wp)
                dxp = dxp.reshape(N, C, hp, wp)
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding]
                _accum(x, dxp)
        out._backward_fn = _bw
    return out


def _pool_windows(x: np.ndarray, size: int):
    N, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"pool size {size} must divide spatial dims of {x.shape}")
    ho, wo = H // size, W // size
    win = x.reshape(N, C, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(N, C, ho, wo, size * size), ho, wo


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    win, ho, wo = _pool_windows(x.data, size)
    arg = win.argmax(axis=-1)
    out = _from_op(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], (x,), "maxpool2d")
    if out.requires_grad:
        N, C, H, W = x.shape

        def _bw():
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, arg[..., None], out.grad[..., None], axis=-1)
            dx = dwin.reshape(N, C, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
            _accum(x, dx)
        out._backward_fn = _bw
    return out


def avgpool2d(x: Tensor, size: int) -> Tensor:
    win, ho, wo = _pool_windows(x.data, size)
    out = _from_op(win.mean(axis=-1), (x,), "avgpool2d")
    if out.requires_grad:
        N, C, H, W = x.shape

        def _bw():
            dwin = np.repeat(out.grad[..., None] / (size * size), size * size, axis=-1)
            dx = dwin.reshape(N, C, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
            _accum(x, dx)
        out._backward_fn = _bw
    return out


# -- pointwise nonlinearities -----------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = _from_op(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _bw():
            # subgradient at exactly 0 is defined as 0
            _accum(x, out.grad * (x.data > 0.0))
        out._backward_fn = _bw
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _from_op(t, (x,), "tanh")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * (1.0 - t * t))
        out._backward_fn = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    out = _from_op(s, (x,), "sigmoid")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * s * (1.0 - s))
        out._backward_fn = _bw
    return out


# -- loss and reductions -----------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits of shape [N,K], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if y.ndim != 1 or y.shape[0] != N:
        raise ShapeError(f"labels must be a length-{N} vector, got shape {y.shape}")
    if N < 1:
        raise ShapeError("softmax_cross_entropy needs at least one sample")
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"label out of range [0, {K}): min={y.min()}, max={y.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    denom = exps.sum(axis=1, keepdims=True)
    probs = exps / denom
    log_probs = shifted - np.log(denom)
    loss_val = -log_probs[np.arange(N), y].mean()

    out = _from_op(np.asarray(loss_val), (logits,), "softmax_cross_entropy")
    if out.requires_grad:
        def _bw():
            d = probs.copy()
            d[np.arange(N), y] -= 1.0
            _accum(logits, d * (float(out.grad) / N))
        out._backward_fn = _bw
    return out


def flatten_batch(x: Tensor) -> Tensor:
    """Collapse all non-batch dims: [N, ...] -> [N, prod(...)]."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten_batch expects a batched tensor, got shape {x.shape}")
    N = x.shape[0]
    out = _from_op(x.data.reshape(N, -1), (x,), "flatten")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad.reshape(x.data.shape))
        out._backward_fn = _bw
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out = _from_op(np.asarray(x.data.sum()), (x,), "sum")
    if out.requires_grad:
        def _bw():
            _accum(x, np.full_like(x.data, float(out.grad)))
        out._backward_fn = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _from_op(x.data * float(c), (x,), "scale")
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * float(c))
        out._backward_fn = _bw
    return out


def select_logit(x: Tensor, row: int, col: int) -> Tensor:
    """Pick a single entry of a 2-D tensor as a scalar (saliency seed)."""
    if x.data.ndim != 2:
        raise ShapeError(f"select_logit expects a 2-D tensor, got shape {x.shape}")
    out = _from_op(np.asarray(x.data[row, col]), (x,), "select_logit")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            g[row, col] = float(out.grad)
            _accum(x, g)
        out._backward_fn = _bw
    return out


# -- gradient verification -----------------------------------------------------------


@dataclass(frozen=True)
class CheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    params_checked: int


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
) -> CheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild a fresh scalar loss from the current parameter
    values on every call. The relative error uses the usual scaled form
    |a - n| / max(1, |a|, |n|) so near-zero gradients compare absolutely.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericFault("finite_difference_check requires finite parameters")
    if not params:
        return CheckReport(max_rel_error=0.0, tol=tol, passed=True, params_checked=0)

    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.reshape(-1).copy() for p in params]

    max_rel = 0.0
    count = 0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn().item()
            flat[idx] = orig - h
            lm = loss_fn().item()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = grads[idx]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > max_rel:
                max_rel = rel
            count += 1
    return CheckReport(max_rel_error=max_rel, tol=tol, passed=max_rel < tol, params_checked=count)


# -- serialization ------------------------------------------------------------------
#
# Flat binary record: 1 byte rank, rank x u32 little-endian dims, then the
# values as little-endian IEEE-754 doubles in row-major order.


def tensor_to_bytes(arr) -> bytes:
    data = _as_f64(arr.data if isinstance(arr, Tensor) else arr)
    rank = data.ndim
    if rank > 255:
        raise FormatError(f"rank {rank} exceeds the record format limit")
    header = struct.pack("<B", rank) + struct.pack(f"<{rank}I", *data.shape)
    return header + data.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    try:
        rank = struct.unpack_from("<B", buf, offset)[0]
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 1)
    except struct.error as exc:
        raise FormatError(f"truncated tensor record: {exc}") from exc
    count = 1
    for d in dims:
        count *= d
    start = offset + 1 + 4 * rank
    end = start + 8 * count
    if end > len(buf):
        raise FormatError(f"truncated tensor record: expected {end - offset} bytes, have {len(buf) - offset}")
    values = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64)
    return values.reshape(dims), end


def write_tensor(f: BinaryIO, arr) -> None:
    f.write(tensor_to_bytes(arr))


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(1)
    if len(head) != 1:
        raise FormatError("truncated tensor record: missing rank byte")
    rank = head[0]
    dim_bytes = f.read(4 * rank)
    if len(dim_bytes) != 4 * rank:
        raise FormatError("truncated tensor record: missing dims")
    dims = struct.unpack(f"<{rank}I", dim_bytes)
    count = 1
    for d in dims:
        count *= d
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated tensor record: missing values")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
