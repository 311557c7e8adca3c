"""Tensors with a taped computation history for reverse-mode differentiation.

All arithmetic runs in float64. Every operation validates that its output is
finite and raises :class:`NumericError` otherwise, so NaN/Inf never propagate
silently. The tape is rebuilt on every forward pass; tensors on a live tape
are never mutated in place.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


ArrayLike = Union[float, int, Sequence, np.ndarray]


def _as_f64(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {where}")


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``requires_grad`` marks leaves whose gradient should be populated by
    :func:`backward`. Interior nodes inherit the flag from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backprop: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = _as_f64(data)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backprop = _backprop

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no tape history."""
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small arithmetic surface; enough for losses and meta-learning testbeds.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(
    data: np.ndarray, parents: tuple, backprop: Callable[[np.ndarray], None], name: str
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {name}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backprop = backprop if needs else None
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backprop, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backprop(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backprop, "mul")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src_shape = t.shape
    out_data = t.data.reshape(shape)

    def backprop(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g.reshape(src_shape))

    return _make(out_data, (t,), backprop, "reshape")


def tensor_sum(t: Tensor) -> Tensor:
    out_data = np.asarray(t.data.sum())

    def backprop(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(np.broadcast_to(g, t.shape).astype(np.float64))

    return _make(out_data, (t,), backprop, "sum")


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0.0
    out_data = np.where(mask, t.data, 0.0)

    def backprop(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * mask)

    return _make(out_data, (t,), backprop, "relu")


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # Two-branch form avoids exp overflow for large |x|.
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backprop(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (t,), backprop, "sigmoid")


def activation(t: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(t)
    if kind == "sigmoid":
        return sigmoid(t)
    raise ValueError(f"unknown activation kind: {kind!r}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements as a scalar tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out_data = np.asarray(np.abs(diff).mean())
    sign = np.sign(diff)

    def backprop(g: np.ndarray) -> None:
        scale = float(g) / count
        if pred.requires_grad:
            pred.accumulate_grad(sign * scale)
        if target.requires_grad:
            target.accumulate_grad(-sign * scale)

    return _make(out_data, (pred, target), backprop, "l1_loss")


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # [N, C, H', W', k, k] view over the padded input
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


def _fold_windows(dwin: np.ndarray, n: int, c: int, hp: int, wp: int, k: int) -> np.ndarray:
    """Scatter-add window gradients [N,C,H',W',k,k] back onto the padded grid."""
    out = np.zeros((n, c, hp, wp))
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + ho, j : j + wo] += dwin[:, :, :, :, i, j]
    return out


def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] plus bias."""
    n, cin, h, w = inp.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d expects a square kernel of odd size")
    k = kh
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty")

    padded = _pad2d(inp.data, padding)

    def build_cols() -> np.ndarray:
        win = _windows(padded, k)  # [N,Cin,Ho,Wo,k,k]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)

    wmat = kernel.data.reshape(cout, cin * k * k)
    out = build_cols() @ wmat.T + bias.data
    out_data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    # The backward pass rebuilds the im2col matrix from the padded input;
    # keeping only `padded` alive holds peak memory down at training sizes.
    def backprop(g: np.ndarray) -> None:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat.T @ build_cols()).reshape(kernel.shape))
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if inp.requires_grad:
            dcols = gmat @ wmat
            dwin = dcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            dpad = _fold_windows(dwin, n, cin, h + 2 * padding, w + 2 * padding, k)
            if padding:
                dpad = dpad[:, :, padding:-padding, padding:-padding]
            inp.accumulate_grad(dpad)

    return _make(out_data, (inp, kernel, bias), backprop, "conv2d")


def depthwise_conv2d(inp: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3x3 convolution, shape preserving (padding 1)."""
    n, c, h, w = inp.shape
    kc, one, kh, kw = kernel.shape
    if kc != c or one != 1:
        raise ValueError(f"depthwise kernel must be [{c},1,k,k], got {kernel.shape}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("depthwise_conv2d expects a square kernel of odd size")
    k = kh
    p = (k - 1) // 2

    padded = _pad2d(inp.data, p)
    win = _windows(padded, k)  # [N,C,H,W,k,k]
    ker = kernel.data[:, 0]  # [C,k,k]
    out_data = np.einsum("nchwij,cij->nchw", win, ker)

    def backprop(g: np.ndarray) -> None:
        if kernel.requires_grad:
            dk = np.einsum("nchwij,nchw->cij", win, g)
            kernel.accumulate_grad(dk[:, None])
        if inp.requires_grad:
            dwin = g[:, :, :, :, None, None] * ker[None, :, None, None, :, :]
            dpad = _fold_windows(dwin, n, c, h + 2 * p, w + 2 * p, k)
            if p:
                dpad = dpad[:, :, p:-p, p:-p]
            inp.accumulate_grad(dpad)

    return _make(out_data, (inp, kernel), backprop, "depthwise_conv2d")


def dense(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,Din] @ [Dout,Din]^T + [Dout]."""
    if inp.shape[-1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"dense dimension mismatch: input {inp.shape}, W {weight.shape}, b {bias.shape}"
        )
    out_data = inp.data @ weight.data.T + bias.data

    def backprop(g: np.ndarray) -> None:
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ inp.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if inp.requires_grad:
            inp.accumulate_grad(g @ weight.data)

    return _make(out_data, (inp, weight, bias), backprop, "dense")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` tensor.

    Repeated calls without zeroing gradients accumulate. The loss must be a
    scalar with a recorded history.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")

    # Iterative topological sort; the in-progress marker guards against the
    # (structurally impossible) cyclic tape.
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 absent, 1 in progress, 2 done
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 2
            order.append(node)
            continue
        st = state.get(nid, 0)
        if st == 2:
            continue
        if st == 1:
            raise AssertionError("cycle detected in computation tape")
        state[nid] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and state.get(id(parent), 0) != 2:
                stack.append((parent, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)
