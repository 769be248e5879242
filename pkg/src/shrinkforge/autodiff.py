"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` is created per forward pass. Every operator appends one
:class:`Node` holding a closure (the vector-Jacobian product) over whatever
intermediates it saved, so nodes are topologically ordered by construction and
:func:`backward` is a single reverse sweep.

Tensors whose ``tape`` is ``None`` are constants: operators accept them, never
record gradients for them, and when every input is a constant the operator
just returns the forward value. Eval-mode inference therefore runs with no
bookkeeping at all.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: Optional["Tape"] = None, id: int = -1):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"

    # operator sugar for loss composition
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    vjp: Callable
    needs: Tuple[bool, ...]
    name: Optional[str] = None
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, int] = {}

    def param(self, name: str, data) -> Tensor:
        """Register a trainable leaf under ``name``."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice on this tape")
        t = self._leaf(data, "param", name)
        self.params[name] = t.id
        return t

    def leaf(self, data) -> Tensor:
        return self._leaf(data, "leaf", None)

    def _leaf(self, data, op, name):
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(Node(op, (), None, (), name, {"shape": t.shape}))
        return t

    def record(self, op: str, inputs: Sequence[Tensor], value, vjp, name=None, saved=None) -> Tensor:
        """Append a node; ``vjp(g, needs)`` returns one gradient per input."""
        ids = []
        needs = []
        for t in inputs:
            tracked = t.tape is self
            if t.tape is not None and not tracked:
                raise ValueError("tensors from different tapes cannot be mixed")
            ids.append(t.id if tracked else -1)
            needs.append(tracked)
        self.nodes.append(Node(op, tuple(ids), vjp, tuple(needs), name, saved or {}))
        return Tensor(value, self, len(self.nodes) - 1)

    def __len__(self):
        return len(self.nodes)


def _emit(op, inputs, value, vjp, name=None, saved=None) -> Tensor:
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(value)
    return tape.record(op, inputs, value, vjp, name, saved)


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every registered parameter.

    Parameters that did not take part in the computation get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.id] = np.ones_like(loss.data)
    for i in range(loss.id, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        in_grads = node.vjp(g, node.needs)
        for j, gi in zip(node.inputs, in_grads):
            if j < 0 or gi is None:
                continue
            grads[j] = gi if grads[j] is None else grads[j] + gi
    out = {}
    for name, i in tape.params.items():
        g = grads[i]
        out[name] = np.zeros(tape.nodes[i].saved["shape"], dtype=DTYPE) if g is None else g
    return out


# ---------------------------------------------------------------------------
# multiply-accumulate accounting

class MacCounter:
    """Accumulates multiply-accumulates reported by conv2d and dense."""

    def __init__(self):
        self.total = 0
        self.by_layer: Dict[str, int] = {}

    def add(self, name, n):
        self.total += n
        key = name or "<anon>"
        self.by_layer[key] = self.by_layer.get(key, 0) + n


_counters: ContextVar[Tuple[MacCounter, ...]] = ContextVar("_counters", default=())


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _counters.set(_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _counters.reset(token)


def _report_macs(name, n):
    for c in _counters.get():
        c.add(name, int(n))


# ---------------------------------------------------------------------------
# operators

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, name=None) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(name, f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(name, f"input has {c_in} channels but kernel expects {k_in}")
    if kh != kw:
        raise ShapeError(name, f"only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(name, f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(name, f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, kernel.data, optimize=True)
    _report_macs(name, n * c_in * kh * kw * c_out * h_out * w_out)
    K = kernel.data

    def vjp(g, needs):
        dx = dk = None
        if needs[1]:
            dk = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        if needs[0]:
            # scatter each kernel tap back onto the padded input grid (NHWC while accumulating)
            g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
            cols = (g_mat @ K.transpose(0, 2, 3, 1).reshape(c_out, -1)).reshape(n, h_out, w_out, kh, kw, c_in)
            dxp = np.zeros((n, xp.shape[2], xp.shape[3], c_in), dtype=DTYPE)
            hs, ws = stride * (h_out - 1) + 1, stride * (w_out - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + hs:stride, j:j + ws:stride, :] += cols[:, :, :, i, j, :]
            dx = dxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        return dx, dk

    return _emit("conv2d", (x, kernel), out, vjp, name)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              running_stats=None, epsilon: float = 1e-5, momentum: float = 0.9, name=None) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    ``running_stats`` is a ``(mean, var)`` pair of arrays. In train mode they
    are updated in place (``r = momentum * r + (1 - momentum) * batch``) when
    given; in eval mode they are required and used for normalization.
    """
    if x.data.ndim != 4:
        raise ShapeError(name, f"batchnorm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(name, f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    bshape = (1, c, 1, 1)
    if mode == "train":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        if running_stats is not None:
            rm, rv = running_stats
            unbiased = var * (m / (m - 1)) if m > 1 else var
            rm *= momentum
            rm += (1.0 - momentum) * mean
            rv *= momentum
            rv += (1.0 - momentum) * unbiased
    elif mode == "eval":
        if running_stats is None:
            raise ValueError(f"[{name}] eval-mode batchnorm needs running stats")
        mean, var = running_stats
        centered = x.data - mean.reshape(bshape)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    g_gamma = gamma.data

    def vjp(g, needs):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] or (needs[0] and mode == "train") else None
        dbeta = g.sum(axis=(0, 2, 3)) if needs[2] or (needs[0] and mode == "train") else None
        dx = None
        if needs[0]:
            scale_ = (g_gamma * inv_std).reshape(bshape)
            if mode == "train":
                dx = scale_ / m * (m * g - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
            else:
                dx = g * scale_
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, vjp, name)


def relu(x: Tensor, name=None) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0.0)

    def vjp(g, needs):
        return (g * mask,)

    return _emit("relu", (x,), out, vjp, name, {"mask": mask})


def avgpool2d(x: Tensor, size: int = 2, name=None) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(name, f"avgpool{size} needs spatial dims divisible by {size}, got {h}x{w}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    inv = 1.0 / (size * size)

    def vjp(g, needs):
        dx = np.repeat(np.repeat(g * inv, size, axis=2), size, axis=3)
        return (dx,)

    return _emit("avgpool", (x,), out, vjp, name)


def reshape(x: Tensor, shape, name=None) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def vjp(g, needs):
        return (g.reshape(in_shape),)

    return _emit("reshape", (x,), out, vjp, name)


def flatten(x: Tensor, name=None) -> Tensor:
    return reshape(x, (x.shape[0], -1), name)


def dense(x: Tensor, weight: Tensor, bias: Tensor, name=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.data.ndim != 2:
        raise ShapeError(name, f"dense expects a 2-d input, got {x.shape}")
    n, f_in = x.shape
    f_out, w_in = weight.shape
    if w_in != f_in or bias.shape != (f_out,):
        raise ShapeError(name, f"dense weight {weight.shape} / bias {bias.shape} incompatible with input {x.shape}")
    out = x.data @ weight.data.T + bias.data
    _report_macs(name, n * f_in * f_out)
    xd, wd = x.data, weight.data

    def vjp(g, needs):
        dx = g @ wd if needs[0] else None
        dw = g.T @ xd if needs[1] else None
        db = g.sum(axis=0) if needs[2] else None
        return dx, dw, db

    return _emit("dense", (x, weight, bias), out, vjp, name)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor, name=None) -> Tensor:
    """Row-wise softmax over the last axis."""
    s = _softmax(x.data)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp, name)


def cross_entropy_with_logits(logits: Tensor, targets, name=None) -> Tensor:
    """Mean over rows of ``-sum(targets * log_softmax(logits))``.

    ``targets`` holds probability rows (one-hot labels or soft targets) and is
    treated as a constant.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape or logits.data.ndim != 2:
        raise ShapeError(name, f"targets {t.shape} do not match logits {logits.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    value = -(t * logp).sum() / n

    def vjp(g, needs):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return _emit("cross_entropy", (logits,), value, vjp, name)


def add(a: Tensor, b: Tensor, name=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(name, f"add needs equal shapes, got {a.shape} and {b.shape}")

    def vjp(g, needs):
        return g, g

    return _emit("add", (a, b), a.data + b.data, vjp, name)


def add_const(x: Tensor, c, name=None) -> Tensor:
    """Add a broadcastable constant array; the gradient passes straight to ``x``."""
    c = np.asarray(c, dtype=DTYPE)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(name, f"constant of shape {c.shape} changes shape of {x.shape}")

    def vjp(g, needs):
        return (g,)

    return _emit("add_const", (x,), out, vjp, name)


def mul(a: Tensor, b: Tensor, name=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(name, f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g * bd if needs[0] else None), (g * ad if needs[1] else None)

    return _emit("mul", (a, b), ad * bd, vjp, name)


def scale(x: Tensor, c: float, name=None) -> Tensor:
    c = float(c)

    def vjp(g, needs):
        return (g * c,)

    return _emit("scale", (x,), x.data * c, vjp, name)


def sum(x: Tensor, name=None) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), x.data.sum(), vjp, name)


def mean(x: Tensor, name=None) -> Tensor:
    shape = x.shape
    inv = 1.0 / x.data.size

    def vjp(g, needs):
        return (np.full(shape, float(g) * inv),)

    return _emit("mean", (x,), x.data.mean(), vjp, name)


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    excluded: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    params: Dict[str, ParamCheck]
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)


def relative_error(analytic, numeric, floor: float = 1e-3):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients sane."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _kink_pattern(tape: Tape) -> bytes:
    return b"".join(np.packbits(n.saved["mask"]).tobytes() for n in tape.nodes if n.op == "relu")


def check_gradients(loss_fn, params: Dict[str, np.ndarray], tolerance: float = 1e-6,
                    step: float = 1e-5, floor: float = 1e-3) -> GradCheckReport:
    """Compare backward() against central finite differences for every coordinate.

    ``loss_fn(tape, tensors)`` must build a scalar loss from the dict of
    parameter tensors. A coordinate whose +step and -step evaluations see a
    different relu activation pattern straddles a kink and is excluded.
    """
    tape = Tape()
    tensors = {k: tape.param(k, v) for k, v in params.items()}
    analytic = backward(tape, loss_fn(tape, tensors))

    def evaluate(name, idx, delta):
        perturbed = {k: v.copy() for k, v in params.items()}
        perturbed[name][idx] += delta
        t = Tape()
        loss = loss_fn(t, {k: t.param(k, v) for k, v in perturbed.items()})
        return float(loss.data), _kink_pattern(t)

    report = GradCheckReport(tolerance, step, {})
    for name, value in params.items():
        worst, checked, excluded, ok = 0.0, 0, 0, True
        for idx in np.ndindex(value.shape):
            fp, kp = evaluate(name, idx, step)
            fm, km = evaluate(name, idx, -step)
            if kp != km:
                excluded += 1
                continue
            numeric = (fp - fm) / (2 * step)
            err = float(relative_error(analytic[name][idx], numeric, floor))
            checked += 1
            if not np.isfinite(err):
                ok = False
                worst = float("nan")
                continue
            if np.isfinite(worst):
                worst = max(worst, err)
        passed = ok and np.isfinite(worst) and worst < tolerance
        report.params[name] = ParamCheck(name, worst, checked, excluded, bool(passed))
        if excluded:
            report.notes.append(f"{name}: {excluded} coordinate(s) excluded at relu kinks")
    return report
