"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op below records itself on the output tensor (parents + a backward
closure); :meth:`Tensor.backward` walks that trace in reverse topological
order and accumulates gradients additively.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NonFiniteError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_state = {"dtype": np.float64, "grad_enabled": True}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("op produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.name = None
        track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- gradient buffer ---------------------------------------------------

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that is not part of a recorded trace")
        order = _topological_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return scale(tsum(self), 1.0 / self.data.size)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        for t in (a, b):
            if t.requires_grad:
                t._accumulate(g if t.shape == g.shape else np.sum(g).reshape(t.shape))

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        x._accumulate(g * factor)

    return Tensor._from_op(x.data * factor, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._from_op(np.sum(x.data).reshape(()), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(
            f"kernel {kernel} larger than padded input {size + 2 * padding}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, lowered to one matrix product over patches."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: bad stride={stride} padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, :, :hspan:stride, :wspan:stride]).reshape(n, c, ho * wo)
    else:
        # patches laid out as N × (C·Kh·Kw) × (Ho·Wo), C-major to match the kernel
        cols = np.stack(
            [xp[:, :, i : i + hspan : stride, j : j + wspan : stride] for i in range(kh) for j in range(kw)],
            axis=2,
        ).reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# Channel plumbing, resampling
# ---------------------------------------------------------------------------


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: {t.shape} incompatible with {ref}")
    if len(inputs) == 1:
        only = inputs[0]

        def backward_one(g):
            only._accumulate(g)

        return Tensor._from_op(only.data.copy(), (only,), backward_one)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return Tensor._from_op(np.concatenate([t.data for t in inputs], axis=1), inputs, backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[1]}")
    outs = []
    lo = 0
    for s in sizes:
        hi = lo + s

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            x._accumulate(full)

        outs.append(Tensor._from_op(x.data[:, lo:hi].copy(), (x,), backward))
        lo = hi
    return outs


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._from_op(out, (x,), backward)


def _check_even(x: Tensor, op: str) -> None:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"{op} needs even spatial extents, got {x.shape}")


def avgpool2x(x: Tensor) -> Tensor:
    _check_even(x, "avgpool2x")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        x._accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return Tensor._from_op(out, (x,), backward)


def maxpool2x(x: Tensor) -> Tensor:
    _check_even(x, "maxpool2x")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accumulate(gx)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        count = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * xhat, axis=axes))
        if beta.requires_grad:
            beta._accumulate(np.sum(g, axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // c
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (invstd.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd.reshape(bshape)
            x._accumulate(dx)

    return Tensor._from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixelwise softmax cross-entropy; ``labels`` is an int array N×H×W."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} != {(n, h, w)}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    picked = np.take_along_axis(z, labels[:, None].astype(np.intp), axis=1)
    count = n * h * w
    loss = np.sum(lse - picked) / count

    def backward(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, labels[:, None].astype(np.intp), np.take_along_axis(p, labels[:, None].astype(np.intp), axis=1) - 1.0, axis=1)
        logits._accumulate(p * (g / count))

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), backward)


def binary_cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy for single-channel logits N×1×H×W."""
    n, k, h, w = logits.shape
    if k != 1:
        raise DimensionError(f"binary cross-entropy expects 1 channel, got {k}")
    y = np.asarray(labels, dtype=logits.data.dtype).reshape(n, 1, h, w)
    z = logits.data
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        logits._accumulate((_sigmoid(z) - y) * (g / z.size))

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), backward)


def soft_dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 minus the mean soft Dice over foreground classes.

    K=1 logits go through a sigmoid, K≥2 through a softmax (class 0 is
    background and excluded).
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    z = logits.data
    if k == 1:
        p = _sigmoid(z)
        y = labels.reshape(n, 1, h, w).astype(z.dtype)
        fg = slice(0, 1)
    else:
        p = _softmax(z)
        y = np.zeros_like(z)
        np.put_along_axis(y, labels[:, None].astype(np.intp), 1.0, axis=1)
        fg = slice(1, k)
    pf, yf = p[:, fg], y[:, fg]
    inter = (pf * yf).sum(axis=(0, 2, 3))
    denom = pf.sum(axis=(0, 2, 3)) + yf.sum(axis=(0, 2, 3)) + smooth
    num = 2.0 * inter + smooth
    nclass = pf.shape[1]
    loss = 1.0 - np.mean(num / denom)

    def backward(g):
        # d(num/denom)/dp = (2y·denom − num) / denom²
        dpf = -(g / nclass) * (2.0 * yf * denom[None, :, None, None] - num[None, :, None, None]) / (
            denom[None, :, None, None] ** 2
        )
        dp = np.zeros_like(z)
        dp[:, fg] = dpf
        if k == 1:
            dz = dp * p * (1.0 - p)
        else:
            dz = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
        logits._accumulate(dz)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), backward)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    n_coords: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar loss from the current ``inputs`` data each
    call. ``n_coords`` coordinates are sampled (with coverage of every input)
    across all inputs.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    sizes = np.array([t.size for t in inputs])
    picks: list[tuple[int, int]] = [(i, int(rng.integers(s))) for i, s in enumerate(sizes)]
    total = sizes.sum()
    while len(picks) < max(n_coords, len(inputs)):
        flat = int(rng.integers(total))
        i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        picks.append((i, flat - int(np.concatenate([[0], np.cumsum(sizes)])[i])))
    worst = 0.0
    with no_grad():
        for i, j in picks:
            buf = inputs[i].data.reshape(-1)
            orig = buf[j]
            buf[j] = orig + h
            fp = fn().item()
            buf[j] = orig - h
            fm = fn().item()
            buf[j] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
