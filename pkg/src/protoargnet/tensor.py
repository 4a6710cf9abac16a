"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves when a :class:`Tape` is active, so plain
inference never pays for graph bookkeeping::

    with Tape() as tape:
        loss = sum_(w * w)
    backward(loss, tape)

Spatial tensors use channels-last layout ``[B, H, W, C]``; every spatial op
also accepts an unbatched ``[H, W, C]`` tensor.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction. A tape belongs to a single forward/backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._outputs.add(out.id)

    def produced(self, t: Tensor) -> bool:
        return t.id in self._outputs

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.id not in self._outputs:
                    seen.setdefault(t.id, t)
        return list(seen.values())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record it on the active tape if any input is tracked."""
    track = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track and _active:
        _active[-1].record(out, tuple(inputs), backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` buffer of every leaf on ``tape``.

    Leaves that the loss does not reach end with an all-zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.zero_grad()
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if tape.produced(t):
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
            else:
                t.grad += gi


# ---------------------------------------------------------------------------
# element-wise and linear algebra


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., n] @ [n, m]`` or ``[n, m] @ [m, p]``."""
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape} "
                         f"(inner dims {a.shape[-1]} vs {b.shape[0]})")

    def grad(g):
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ b.data.T, a2.T @ g2)

    return _result(a.data @ b.data, (a, b), grad)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes when None). Covers channel-wise sums too."""
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside an operand.

    Each operand's gradient is itself an einsum of the upstream gradient with
    the other operand; indices summed away entirely must appear in both inputs.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb, out_sub):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in {subscripts!r}")
    for ch in sa:
        if ch not in sb and ch not in out_sub:
            raise ValueError(f"index {ch!r} of the first operand is summed alone")
    for ch in sb:
        if ch not in sa and ch not in out_sub:
            raise ValueError(f"index {ch!r} of the second operand is summed alone")
    data = np.einsum(subscripts, a.data, b.data, optimize=True)

    def grad(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return (ga, gb)

    return _result(data, (a, b), grad)


# ---------------------------------------------------------------------------
# spatial ops


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [H,W,C] or [B,H,W,C], got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[B,H,W,Cin]`` input with ``[Kh,Kw,Cin,Cout]`` kernels."""
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be [Kh,Kw,Cin,Cout], got shape {kernels.shape}")
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    kh, kw, cin, cout = kernels.shape
    if cin != C:
        raise ValueError(f"conv2d channel mismatch: input has Cin={C}, kernels expect Cin={cin}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input "
                         f"{H + 2 * padding}x{W + 2 * padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _unbatched(_pointwise_conv(x, kernels), squeeze)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # window view: [B, Ho, Wo, C, kh, kw] -> columns ordered (kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    kmat = kernels.data.reshape(kh * kw * C, cout)
    out = (cols @ kmat).reshape(B, Ho, Wo, cout)

    def grad(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        if not x.requires_grad:
            return (None, gk)
        gcols = (g2 @ kmat.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (Ho - 1) + 1:stride,
                    j:j + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + H, padding:padding + W, :]
        return (np.ascontiguousarray(gx), gk)

    return _unbatched(_result(out, (x, kernels), grad), squeeze)


def _pointwise_conv(x: Tensor, kernels: Tensor) -> Tensor:
    B, H, W, C = x.shape
    kmat = kernels.data.reshape(C, -1)
    x2 = x.data.reshape(B * H * W, C)

    def grad(g):
        g2 = g.reshape(B * H * W, -1)
        gx = (g2 @ kmat.T).reshape(x.shape) if x.requires_grad else None
        gk = (x2.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        return (gx, gk)

    return _result((x2 @ kmat).reshape(B, H, W, -1), (x, kernels), grad)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2, trailing odd row/column dropped.

    The subgradient goes to the first maximum of each window in row-major order.
    """
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ValueError(f"max_pool2d needs H,W >= 2, got {H}x{W}")
    win = (x.data[:, :2 * H2, :2 * W2]
           .reshape(B, H2, 2, W2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H2, W2, 4, C))
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def grad(g):
        gw = np.zeros((B, H2, W2, 4, C))
        np.put_along_axis(gw, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = np.zeros((B, H, W, C))
        gx[:, :2 * H2, :2 * W2] = (gw.reshape(B, H2, W2, 2, 2, C)
                                   .transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H2, 2 * W2, C))
        return (gx,)

    return _unbatched(_result(out, (x,), grad), squeeze)


def l2_normalize_patches(x: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Scale every vector along the last axis to ``v / max(|v|, epsilon)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    y = x.data / denom
    clipped = norm < epsilon

    def grad(g):
        proj = np.where(clipped, 0.0, (y * g).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _result(y, (x,), grad)


def _spatial_argmax(data: np.ndarray) -> np.ndarray:
    """Flat (row-major over H,W) index of the first maximum, shape [B, C]."""
    B, H, W, C = data.shape
    return data.reshape(B, H * W, C).argmax(axis=1)


def channel_wise_max(x: Tensor) -> Tensor:
    """Keep each channel's maximum at its position and zero everything else.

    Ties go to the lowest row-major position; only the kept entry receives
    gradient.
    """
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    idx = _spatial_argmax(x.data)
    mask = np.zeros((B, H * W, C), dtype=bool)
    np.put_along_axis(mask, idx[:, None, :], True, axis=1)
    mask = mask.reshape(B, H, W, C)
    return _unbatched(_result(x.data * mask, (x,), lambda g: (g * mask,)), squeeze)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum ``[B,H,W,C] -> [B,C]`` (same tie rule)."""
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    idx = _spatial_argmax(x.data)
    flat = x.data.reshape(B, H * W, C)
    out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

    def grad(g):
        gf = np.zeros((B, H * W, C))
        np.put_along_axis(gf, idx[:, None, :], g[:, None, :], axis=1)
        return (gf.reshape(B, H, W, C),)

    y = _result(out, (x,), grad)
    return reshape(y, (C,)) if squeeze else y


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Fused log-softmax + negative log-likelihood over ``[B, K]`` logits.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"`` ([B]).
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    B, K = z.shape
    if targets.shape[0] != B:
        raise ValueError(f"{B} logit rows but {targets.shape[0]} targets")
    if np.any(targets < 0) or np.any(targets >= K):
        raise ValueError(f"targets must lie in [0, {K})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    per = lse - z[np.arange(B), targets]
    probs = softmax(z)
    onehot = np.zeros_like(z)
    onehot[np.arange(B), targets] = 1.0
    base = probs - onehot

    if reduction == "none":
        data = per
        def grad(g):
            return ((base * g[:, None]).reshape(logits.shape),)
    elif reduction in ("mean", "sum"):
        scale = 1.0 / B if reduction == "mean" else 1.0
        data = np.asarray(per.sum() * scale)
        def grad(g):
            return ((base * (g * scale)).reshape(logits.shape),)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _result(data, (logits,), grad)
