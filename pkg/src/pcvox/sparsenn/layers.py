"""Parameterized layers built from the sparse ops."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .autograd import Variable
from .tensor import SparseTensor


class Module:
    """Holds parameters (``Variable``), buffers (``ndarray``) and child modules.

    Names are dotted attribute paths in definition order, which makes them
    stable across runs and usable as checkpoint keys.
    """

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Variable]]:
        out = []
        for name, value in self._children():
            if isinstance(value, Variable):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = []
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(prefix + name + "."))
        for name in getattr(self, "_buffer_names", ()):
            out.append((prefix + name, getattr(self, name)))
        return out

    def parameters(self) -> List[Variable]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def cast(self, dtype) -> "Module":
        """Convert parameters and buffers (float64 for gradient checking)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in getattr(m, "_buffer_names", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


def _param(data, name=None) -> Variable:
    return Variable(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Conv(Module):
    """Sparse convolution; ``stride=2`` requires ``kernel_size=2``."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1,
                 rng: np.random.Generator = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        kv = kernel_size ** 3
        std = np.sqrt(2.0 / (kv * c_in))
        self.weight = _param(rng.normal(0.0, std, (kv, c_in, c_out)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self._kernel_size = kernel_size
        self._stride = stride

    @property
    def kernel(self) -> ops.ConvKernel:
        return ops.ConvKernel(self._kernel_size, self._stride, self.weight, self.bias)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        return ops.sparse_conv(st, self.kernel)


class TransposedConv(Conv):
    """K=2, s=2 generative upsampling to all eight children."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator = None, bias: bool = True):
        super().__init__(c_in, c_out, 2, 2, rng, bias)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        return ops.transposed_sparse_conv(st, self.kernel)


class Linear(Conv):
    """1x1x1 convolution (per-coordinate dense layer)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator = None, bias: bool = True):
        super().__init__(c_in, c_out, 1, 1, rng, bias)
        # unit-gain init: heads are often followed by a sigmoid
        self.weight.data *= np.float32(np.sqrt(0.5))

    def __call__(self, st: SparseTensor) -> SparseTensor:
        ops.log_conv("linear", len(st), *self.weight.data.shape[1:])
        return st.with_feats(ops.matmul(st.feats, _as_matrix(self.weight), self.bias))


def _as_matrix(w: Variable) -> Variable:
    return ops.reshape(w, w.data.shape[1:])


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._momentum = momentum
        self._eps = eps

    def __call__(self, st: SparseTensor) -> SparseTensor:
        return st.with_feats(ops.batch_norm(st.feats, self.gamma, self.beta, self.running_mean,
                                            self.running_var, self.training, self._momentum,
                                            self._eps))


class SConvBlock(Module):
    """Sparse convolution, batch normalization, ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1,
                 rng: np.random.Generator = None):
        # a bias before batch normalization would be cancelled by the mean
        self.conv = Conv(c_in, c_out, kernel_size, stride, rng, bias=False)
        self.norm = BatchNorm(c_out)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        st = self.norm(self.conv(st))
        return st.with_feats(ops.relu(st.feats))


class SInceptionResNet(Module):
    """Residual block with a one-conv and a two-conv branch of C/2 channels each.

    The branches are concatenated, fused by a 1x1x1 convolution and added to
    the input before a final ReLU.
    """

    def __init__(self, channels: int, rng: np.random.Generator = None):
        if channels % 2:
            raise ValueError("SInceptionResNet needs an even channel count")
        half = channels // 2
        self.branch_a = SConvBlock(channels, half, 3, 1, rng)
        self.branch_b = [SConvBlock(channels, half, 3, 1, rng), SConvBlock(half, half, 3, 1, rng)]
        self.fuse = Linear(channels, channels, rng)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        a = self.branch_a(st)
        b = self.branch_b[1](self.branch_b[0](st))
        fused = self.fuse(st.with_feats(ops.concat([a.feats, b.feats])))
        return st.with_feats(ops.relu(ops.add(st.feats, fused.feats)))
