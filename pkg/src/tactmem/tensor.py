"""Dense-array reverse-mode autodiff, just big enough to train the encoder.

Values are NumPy arrays; every op records a backward closure on the node it
produces, and ``backward(loss)`` replays the closures in reverse topological
order. The op set is deliberately closed: matmul, elementwise add/sub/mul,
scalar scaling, softmax, layer norm, GELU, linear, concat/slice and the
shape plumbing (reshape/transpose/expand) needed by multi-head attention.
There is no general broadcasting beyond bias-add and the explicit
``expand``; shapes must line up, and mismatches raise with both shapes in
the message.

float64 is the default (tests and gradient checks run in it); training may
construct float32 tensors for speed.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True
_next_id = 0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


def _shape_check(op: str, ok: bool, *shapes):
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        global _next_id
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = _next_id
        _next_id += 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"

    # Sugar for the common arithmetic; everything routes through the module
    # functions so the tape sees a single implementation of each op.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled:
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for equal-rank stacked operands, or ND x 2D (shared weight)."""
    if b.data.ndim == 2 and a.data.ndim >= 2:
        _shape_check("matmul", a.shape[-1] == b.shape[0], a.shape, b.shape)
    elif a.data.ndim == b.data.ndim and a.data.ndim >= 2:
        _shape_check(
            "matmul",
            a.shape[-1] == b.shape[-2] and a.shape[:-2] == b.shape[:-2],
            a.shape,
            b.shape,
        )
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if b.data.ndim == 2:
            _accum(a, g @ b.data.T)
            m, p = b.shape
            _accum(b, a.data.reshape(-1, m).T @ g.reshape(-1, p))
        else:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a trailing-axis bias vector for b."""
    bias = b.data.ndim == 1 and a.data.ndim > 1 and b.shape[0] == a.shape[-1]
    _shape_check("add", bias or a.shape == b.shape, a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("sub", a.shape == b.shape, a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("mul", a.shape == b.shape, a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: "Tensor | float") -> Tensor:
    """Multiply by a python scalar or a single-element parameter tensor."""
    if isinstance(s, Tensor):
        _shape_check("scale", s.data.size == 1, a.shape, s.shape)

        def backward(g: np.ndarray) -> None:
            _accum(a, g * s.data.reshape(()))
            _accum(s, np.asarray(np.sum(g * a.data), dtype=s.dtype).reshape(s.shape))

        return _make(a.data * s.data.reshape(()), (a, s), backward)

    def backward_const(g: np.ndarray) -> None:
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward_const)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale/shift."""
    d = a.shape[-1]
    _shape_check("layer_norm", gain.shape == (d,) and bias.shape == (d,), a.shape, gain.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        _accum(
            a,
            inv
            * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return _make(y, (a, gain, bias), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    y = a.data * cdf

    def backward(g: np.ndarray) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, g * (cdf + a.data * pdf))

    return _make(y.astype(a.dtype, copy=False), (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over leading axes."""
    return add(matmul(x, w), b)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        other[axis] = base[axis]
        _shape_check("concat", other == base, parts[0].shape, p.shape)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g: np.ndarray) -> None:
        offsets = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _make(a.data[idx].copy(), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes).copy(), (a,), backward)


def expand(a: Tensor, reps: int, axis: int) -> Tensor:
    """Tile a size-1 axis ``reps`` times (the only broadcast besides bias-add)."""
    _shape_check("expand", a.shape[axis] == 1, a.shape, (reps,))

    def backward(g: np.ndarray) -> None:
        _accum(a, g.sum(axis=axis, keepdims=True))

    return _make(np.repeat(a.data, reps, axis=axis), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def backward_all(g: np.ndarray) -> None:
            _accum(a, np.full_like(a.data, g.reshape(()) / n))

        return _make(np.asarray(a.data.mean(), dtype=a.dtype).reshape(()), (a,), backward_all)

    n = a.shape[axis]

    def backward(g: np.ndarray) -> None:
        _accum(a, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)

    return _make(a.data.mean(axis=axis), (a,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    _shape_check("mse", pred.shape == target.shape, pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def backward(g: np.ndarray) -> None:
        go = g.reshape(()) * 2.0 / n
        _accum(pred, go * diff)
        _accum(target, -go * diff)

    return _make(np.asarray(np.mean(diff * diff), dtype=pred.dtype).reshape(()), (pred, target), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Off by default across the model (p == 0)."""
    if p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's ``grad``.

    The loss must be scalar. The tape is released afterwards; re-running
    backward on the same graph requires rebuilding it.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Consume the tape: drop closures so intermediate buffers can be freed.
    for node in topo:
        node._backward = None
        node._parents = ()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a fresh Tensor to a scalar Tensor. For large inputs a
    deterministic subsample of coordinates can be checked via ``max_coords``.
    Relative error per coordinate: |ad - fd| / max(1e-8, |ad| + |fd|).
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    g_ad = xt.grad.copy() if xt.grad is not None else np.zeros_like(x)

    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(x.size, size=max_coords, replace=False)
    worst = 0.0
    flat = x.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        f_plus = float(f(Tensor(x.copy())).data)
        flat[c] = orig - eps
        f_minus = float(f(Tensor(x.copy())).data)
        flat[c] = orig
        g_fd = (f_plus - f_minus) / (2.0 * eps)
        g = g_ad.reshape(-1)[c]
        err = abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers per parameter name plus the step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} at step {state.step}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoints: named-tensor container, version-tagged, raw float32 payload.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TMCK"
_CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype=np.float32)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a tactmem checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version} != {_CKPT_VERSION}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype=np.float32).reshape(shape)
            out[name] = data.copy()
        return out
