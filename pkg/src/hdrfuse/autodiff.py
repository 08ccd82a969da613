"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors store float32 values (NCHW layout, up to 4 dims); reductions
accumulate in float64 before casting back, which keeps gradient checks and
branch-merge equivalence tight. Graphs are built eagerly by the op
functions and traversed once, in reverse topological order, by
:func:`backward`. Calling backward twice without zeroing accumulates.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

_F32 = np.float32
_F64 = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=_F32)
        if arr.ndim > 4:
            raise ValidationError(f"Tensor supports up to 4 dims, got {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, contribution: np.ndarray):
        contribution = contribution.astype(_F32)
        if self.grad is None:
            self.grad = contribution.copy()
        else:
            self.grad = self.grad + contribution

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.grad is not None})"


def _result(data, parents, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents), _op=op)


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), [x], "relu")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0))

    out._backward = _bw
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise ValidationError(f"add: shape mismatch {x.data.shape} vs {y.data.shape}")
    out = _result(x.data + y.data, [x, y], "add")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad)
        if y.requires_grad:
            y._accumulate(out.grad)

    out._backward = _bw
    return out


def mul_scalar(x: Tensor, s) -> Tensor:
    """Multiply by a python float or a one-element Tensor (trainable scale)."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ValidationError(f"mul_scalar: scale must be one element, got {s.data.shape}")
        out = _result(x.data * float(s.data.reshape(())), [x, s], "mul_scalar")

        def _bw():
            if x.requires_grad:
                x._accumulate(out.grad * float(s.data.reshape(())))
            if s.requires_grad:
                contrib = np.sum(out.grad.astype(_F64) * x.data.astype(_F64))
                s._accumulate(np.full(s.data.shape, contrib))

        out._backward = _bw
        return out

    sval = float(s)
    out = _result(x.data * _F32(sval), [x], "mul_scalar")

    def _bw():
        if x.requires_grad:
            x._accumulate(out.grad * _F32(sval))

    out._backward = _bw
    return out


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValidationError("concat_channels: empty input list")
    out = _result(np.concatenate([p.data for p in parts], axis=1), parts, "concat")
    sizes = [p.data.shape[1] for p in parts]

    def _bw():
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(out.grad[:, offset:offset + size])
            offset += size

    out._backward = _bw
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = _result(x.data[:, start:stop], [x], "slice")

    def _bw():
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, start:stop] = out.grad
            x._accumulate(buf)

    out._backward = _bw
    return out


def _flip(x: Tensor, axis: int, op: str) -> Tensor:
    out = _result(np.flip(x.data, axis=axis).copy(), [x], op)

    def _bw():
        if x.requires_grad:
            x._accumulate(np.flip(out.grad, axis=axis))

    out._backward = _bw
    return out


def flip_h(x: Tensor) -> Tensor:
    """Flip along the width axis."""
    return _flip(x, x.data.ndim - 1, "flip_h")


def flip_v(x: Tensor) -> Tensor:
    """Flip along the height axis."""
    return _flip(x, x.data.ndim - 2, "flip_v")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero 'same' padding, kernels 1x1 or 3x3.

    x is (N, Cin, H, W); w is (Cout, Cin, k, k); b is (Cout,) or None.
    """
    if stride != 1:
        raise ValidationError("conv2d: only stride 1 is supported")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValidationError(
            f"conv2d: expected 4-dim input and weight, got {x.data.shape} / {w.data.shape}"
        )
    n, cin, h, wd = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if k != k2 or k not in (1, 3):
        raise ValidationError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if cin != cin_w:
        raise ValidationError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.data.shape != (cout,):
        raise ValidationError(f"conv2d: bias shape {b.data.shape} != ({cout},)")

    x64 = x.data.astype(_F64)
    w64 = w.data.astype(_F64)
    if k == 1:
        acc = np.einsum("oc,nchw->nohw", w64[:, :, 0, 0], x64)
    else:
        xp = np.pad(x64, ((0, 0), (0, 0), (1, 1), (1, 1)))
        acc = np.zeros((n, cout, h, wd), dtype=_F64)
        for di in range(3):
            for dj in range(3):
                acc += np.einsum(
                    "oc,nchw->nohw", w64[:, :, di, dj], xp[:, :, di:di + h, dj:dj + wd]
                )
    if b is not None:
        acc = acc + b.data.astype(_F64)[None, :, None, None]

    parents = [x, w] if b is None else [x, w, b]
    out = _result(acc, parents, "conv2d")

    def _bw():
        g64 = out.grad.astype(_F64)
        if k == 1:
            if x.requires_grad:
                x._accumulate(np.einsum("oc,nohw->nchw", w64[:, :, 0, 0], g64))
            if w.requires_grad:
                dw = np.einsum("nohw,nchw->oc", g64, x64)[:, :, None, None]
                w._accumulate(dw)
        else:
            xp_local = np.pad(x64, ((0, 0), (0, 0), (1, 1), (1, 1)))
            if x.requires_grad:
                dxp = np.zeros_like(xp_local)
                for di in range(3):
                    for dj in range(3):
                        dxp[:, :, di:di + h, dj:dj + wd] += np.einsum(
                            "oc,nohw->nchw", w64[:, :, di, dj], g64
                        )
                x._accumulate(dxp[:, :, 1:1 + h, 1:1 + wd])
            if w.requires_grad:
                dw = np.zeros_like(w64)
                for di in range(3):
                    for dj in range(3):
                        dw[:, :, di, dj] = np.einsum(
                            "nohw,nchw->oc", g64, xp_local[:, :, di:di + h, dj:dj + wd]
                        )
                w._accumulate(dw)
        if b is not None and b.requires_grad:
            b._accumulate(g64.sum(axis=(0, 2, 3)))

    out._backward = _bw
    return out


def mu_law_t(x: Tensor, mu: float) -> Tensor:
    """Differentiable mu-law compressor; negatives clamp to 0 with zero gradient."""
    if not mu > 0:
        raise ValidationError(f"mu_law_t: mu must be > 0, got {mu}")
    clamped = np.clip(x.data.astype(_F64), 0.0, None)
    denom = np.log1p(mu)
    out = _result(np.log1p(mu * clamped) / denom, [x], "mu_law")

    def _bw():
        if x.requires_grad:
            grad = mu / ((1.0 + mu * clamped) * denom)
            grad[x.data < 0] = 0.0
            x._accumulate(out.grad.astype(_F64) * grad)

    out._backward = _bw
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient at zero residual is zero."""
    if pred.data.shape != target.data.shape:
        raise ValidationError(
            f"l1_loss: shape mismatch {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data.astype(_F64) - target.data.astype(_F64)
    out = _result(np.mean(np.abs(diff)), [pred, target], "l1")

    def _bw():
        scale = float(out.grad.reshape(())) / diff.size
        sign = np.sign(diff)
        if pred.requires_grad:
            pred._accumulate(sign * scale)
        if target.requires_grad:
            target._accumulate(-sign * scale)

    out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.sum(x.data.astype(_F64)), [x], "sum")

    def _bw():
        if x.requires_grad:
            x._accumulate(np.full(x.data.shape, float(out.grad.reshape(()))))

    out._backward = _bw
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into all requires_grad leaves."""
    if loss.data.size != 1:
        raise ValidationError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


class AdamState:
    """First/second moment accumulators for one parameter list."""

    def __init__(self):
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update in place; moments are kept in float64."""
    if len(params) != len(grads):
        raise ValidationError("adam_step: params and grads length mismatch")
    if state.m is None:
        state.m = [np.zeros(p.data.shape, dtype=_F64) for p in params]
        state.v = [np.zeros(p.data.shape, dtype=_F64) for p in params]
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g64 = np.zeros(p.data.shape, dtype=_F64) if g is None else np.asarray(g, dtype=_F64)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g64
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g64 * g64
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data = (p.data.astype(_F64) - lr * mhat / (np.sqrt(vhat) + eps)).astype(_F32)
