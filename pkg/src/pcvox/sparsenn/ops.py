"""Differentiable operations on :class:`Variable` and :class:`SparseTensor`.

Dense ops work on plain ``Variable`` feature matrices; the sparse
convolutions take a ``SparseTensor`` and use its cached kernel maps. Each op
records one backward closure on the active tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from .autograd import Variable, result
from .tensor import SparseTensor

BCE_EPS = 1e-7


# ---------------------------------------------------------------- FLOPs trace

class ConvRecord(NamedTuple):
    name: str
    n_active: int
    c_in: int
    c_out: int

    @property
    def flops(self) -> int:
        return 2 * self.n_active * self.c_in * self.c_out


class FlopTrace(list):
    """List of :class:`ConvRecord` filled by convolutions run inside :func:`trace_flops`."""


_TRACES: List[FlopTrace] = []


@contextlib.contextmanager
def trace_flops():
    trace = FlopTrace()
    _TRACES.append(trace)
    try:
        yield trace
    finally:
        _TRACES.remove(trace)


def log_conv(name: str, n_active: int, c_in: int, c_out: int) -> None:
    for trace in _TRACES:
        trace.append(ConvRecord(name, int(n_active), int(c_in), int(c_out)))


def count_flops(trace: Sequence[ConvRecord]) -> int:
    """Sum of ``2 * N_a * C_i * C_o`` over the recorded convolutions."""
    return int(sum(r.flops for r in trace))


# ---------------------------------------------------------- dense primitives

def add(a: Variable, b: Variable) -> Variable:
    """Elementwise sum; ``b`` may broadcast along the leading axis."""
    def back(g):
        gb = g if b.data.shape == g.shape else g.reshape(-1, *b.data.shape).sum(0)
        return g, gb
    return result(a.data + b.data, (a, b), back)


def mul(a: Variable, b: Variable) -> Variable:
    return result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Variable, c: float) -> Variable:
    return result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def total(a: Variable) -> Variable:
    """Scalar sum, accumulated in float64."""
    out = np.sum(a.data, dtype=np.float64)
    return result(np.asarray(out), (a,), lambda g: (np.full_like(a.data, g),))


def relu(a: Variable) -> Variable:
    mask = a.data > 0
    return result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Variable) -> Variable:
    s = expit(a.data)
    return result(s, (a,), lambda g: (g * s * (1 - s),))


def concat(parts: Sequence[Variable], axis: int = 1) -> Variable:
    parts = tuple(parts)
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return result(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def take_cols(a: Variable, cols) -> Variable:
    cols = np.atleast_1d(np.asarray(cols))

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None), cols), g)  # repeated columns accumulate
        return (ga,)
    return result(a.data[:, cols], (a,), back)


def take_rows(a: Variable, rows) -> Variable:
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)
    return result(a.data[rows], (a,), back)


def reshape(a: Variable, shape) -> Variable:
    return result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def matmul(x: Variable, w: Variable, b: Optional[Variable] = None) -> Variable:
    """``x @ w (+ b)`` for feature matrices; one 1x1x1 convolution."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, g.sum(0))
    inputs = (x, w) if b is None else (x, w, b)
    return result(out, inputs, back)


def ste_round(p: Variable) -> Variable:
    """1 where ``p >= 0.5`` else 0; the backward pass is the identity."""
    return result((p.data >= 0.5).astype(p.data.dtype), (p,), lambda g: (g,))


def bce(p: Variable, target, reduce: bool = True) -> Variable:
    """``-b ln p - (1-b) ln(1-p)`` with ``p`` clamped to [1e-7, 1-1e-7]; nats, float64.

    ``target`` may be a Variable (its gradient is ``ln((1-p)/p)``) or an array.
    """
    t = target.data if isinstance(target, Variable) else np.asarray(target, p.data.dtype)
    inside = (p.data >= BCE_EPS) & (p.data <= 1 - BCE_EPS)
    pc = np.clip(p.data.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    elem = -(t * np.log(pc) + (1 - t) * np.log1p(-pc))
    data = np.asarray(elem.sum()) if reduce else elem

    def back(g):
        gp = (g * ((1 - t) / (1 - pc) - t / pc) * inside).astype(p.data.dtype)
        if isinstance(target, Variable):
            return gp, (g * (np.log1p(-pc) - np.log(pc))).astype(t.dtype)
        return (gp,)
    inputs = (p, target) if isinstance(target, Variable) else (p,)
    return result(data, inputs, back)


def bce_with_logits(z: Variable, target, reduce: bool = True) -> Variable:
    """BCE of ``sigmoid(z)`` computed stably from the logit; nats, float64.

    Unlike :func:`bce` there is no clamp, so it is exact for large ``|z|``.
    """
    t = np.asarray(target.data if isinstance(target, Variable) else target, z.data.dtype)
    zd = z.data.astype(np.float64)
    elem = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    data = np.asarray(elem.sum()) if reduce else elem

    def back(g):
        gz = (g * (expit(zd) - t)).astype(z.data.dtype)
        if isinstance(target, Variable):
            return gz, (-g * zd).astype(t.dtype)
        return (gz,)
    inputs = (z, target) if isinstance(target, Variable) else (z,)
    return result(data, inputs, back)


def batch_norm(x: Variable, gamma: Variable, beta: Variable, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Variable:
    """Per-channel normalization over all rows (active coordinates).

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running statistics are used.
    """
    xd = x.data
    n = xd.shape[0]
    if training and n > 1:
        mean = xd.mean(0, dtype=np.float64)
        var = xd.var(0, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
        use_batch = True
    else:
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
        use_batch = False
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mean) * inv).astype(xd.dtype)
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = (g * xhat).sum(0)
        gb = g.sum(0)
        if use_batch:
            gx = (gamma.data * inv / n) * (n * g - gb - xhat * gg)
        else:
            gx = g * (gamma.data * inv)
        return gx.astype(xd.dtype), gg, gb
    return result(out.astype(xd.dtype), (x, gamma, beta), back)


# ----------------------------------------------------------- sparse kernels

def _gather(x: np.ndarray, kmap: np.ndarray) -> np.ndarray:
    """Rows of ``x`` per kernel offset, flattened to ``(len(kmap), K * C)``; -1 gives zeros."""
    padded = np.concatenate([x, np.zeros((1, x.shape[1]), x.dtype)])
    return padded[kmap].reshape(len(kmap), -1)


def _gather_matmul(x: Variable, kmap: np.ndarray, w: Variable, b: Optional[Variable],
                   symmetric: bool = False) -> Variable:
    """``out[o] = sum_k x[kmap[o, k]] @ w[k] (+ b)``; ``kmap == -1`` contributes zero.

    ``symmetric`` declares that offset ``k`` and offset ``K-1-k`` are mirror
    images and input and output coordinates coincide (stride 1, odd K). The
    input gradient is then a gather through the mirrored map rather than a
    scatter.
    """
    n_in, c_in = x.data.shape
    kv, _, c_out = w.data.shape
    out = _gather(x.data, kmap) @ w.data.reshape(kv * c_in, c_out)
    if b is not None:
        out += b.data

    def back(g):
        gw = (_gather(x.data, kmap).T @ g).reshape(w.data.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad and symmetric:
            wt = w.data[::-1].transpose(0, 2, 1).reshape(kv * c_out, c_in)
            gx = _gather(g, kmap) @ wt
        elif x.requires_grad:
            gcols = (g @ w.data.reshape(kv * c_in, c_out).T).reshape(len(kmap), kv, c_in)
            acc = np.zeros((n_in + 1, c_in), dtype=x.data.dtype)
            for k in range(kv):
                # rows are unique per offset except the -1 sentinel, which is discarded
                acc[kmap[:, k]] += gcols[:, k]
            gx = acc[:n_in]
        return (gx, gw) if b is None else (gx, gw, g.sum(0))
    inputs = (x, w) if b is None else (x, w, b)
    return result(out, inputs, back)


@dataclass
class ConvKernel:
    """Weights ``(K^3, C_in, C_out)`` and bias ``(C_out,)`` of one sparse convolution."""

    kernel_size: int
    stride: int
    weight: Variable
    bias: Optional[Variable] = None

    def __post_init__(self):
        if self.kernel_size not in (1, 2, 3) or self.stride not in (1, 2):
            raise ValueError(f"unsupported kernel {self.kernel_size} stride {self.stride}")
        if self.stride == 2 and self.kernel_size != 2:
            raise ValueError("stride 2 requires kernel size 2")
        kv = self.kernel_size ** 3
        if self.weight.data.ndim != 3 or self.weight.data.shape[0] != kv:
            raise ValueError(f"weight shape {self.weight.data.shape} does not fit K={self.kernel_size}")
        if self.bias is not None and self.bias.data.shape != (self.weight.data.shape[2],):
            raise ValueError("bias shape does not match output channels")

    @property
    def c_in(self) -> int:
        return self.weight.data.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.data.shape[2]


def _check_channels(st: SparseTensor, k: ConvKernel) -> None:
    if st.channels != k.c_in:
        raise ValueError(f"tensor has {st.channels} channels, kernel expects {k.c_in}")


def sparse_conv(st: SparseTensor, k: ConvKernel, name: str = "conv") -> SparseTensor:
    """Stride 1 keeps coordinates; stride 2 maps to ``coord // 2`` from the 2^3 children."""
    _check_channels(st, k)
    if k.stride == 1:
        cs, kmap = st.cs, st.cs.neighbour_map(k.kernel_size)
    else:
        cs, kmap = st.cs.downsample()
    log_conv(name, len(st), k.c_in, k.c_out)
    symmetric = k.stride == 1 and k.kernel_size % 2 == 1
    return SparseTensor(cs, _gather_matmul(st.feats, kmap, k.weight, k.bias, symmetric))


def transposed_sparse_conv(st: SparseTensor, k: ConvKernel, name: str = "tconv") -> SparseTensor:
    """K=2, s=2 generative dilation: parent row ``p`` yields children at rows ``8p .. 8p+7``.

    Child ``i`` receives ``feat(p) @ W[i] + b``.
    """
    _check_channels(st, k)
    if k.kernel_size != 2 or k.stride != 2:
        raise ValueError("transposed convolution supports K=2, s=2 only")
    cs = st.cs.upsample()
    x, w, b = st.feats, k.weight, k.bias
    n, c_out = len(st), k.c_out
    # as one (C_in, 8 * C_out) matrix so the product goes through BLAS
    w2 = w.data.transpose(1, 0, 2).reshape(k.c_in, 8 * c_out)
    out = (x.data @ w2).reshape(n * 8, c_out)
    if b is not None:
        out += b.data

    def back(g):
        g2 = g.reshape(n, 8 * c_out)
        gx = g2 @ w2.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (x.data.T @ g2).reshape(k.c_in, 8, c_out).transpose(1, 0, 2)
        return (gx, gw) if b is None else (gx, gw, g.sum(0))
    log_conv(name, n, k.c_in, k.c_out)
    inputs = (x, w) if b is None else (x, w, b)
    return SparseTensor(cs, result(out, inputs, back))
