"""Dense tensors over numpy with reverse-mode differentiation.

Design constraints:
  - float32 is the training dtype; build float64 tensors for gradient checks
    (central differences are unreliable in float32).
  - Broadcasting is restricted to "B matches the trailing dims of A" so shape
    bugs fail loudly; explicit expansion goes through broadcast_to().
  - Graphs are single-use: backward() frees the node links it visited.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .formats import FileFormatError, Reader

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "add",
    "hadamard",
    "scale",
    "matmul",
    "linear",
    "softmax",
    "layer_norm",
    "gelu",
    "transpose",
    "reshape",
    "concat",
    "broadcast_to",
    "mean",
    "reduce_sum",
    "cross_entropy_logits",
    "backward",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "CKPT_MAGIC",
]


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names op and shapes."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real array plus an optional backreference into the graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __getitem__(self, key) -> "Tensor":
        _check_basic_key(key)
        out_data = self.data[key]

        def bwd(g):
            buf = np.zeros_like(self.data)
            buf[key] = g
            _accum(self, buf)

        return _node(out_data, (self,), bwd)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _check_basic_key(key) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis:
            raise ShapeError(f"slice: only basic indexing is supported, got {p!r}")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = bwd
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _trailing_match(op: str, a: Tensor, b: Tensor) -> None:
    """b must equal a's trailing dims (leading-dim batch broadcast only)."""
    if a.ndim < b.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_leading(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if a.ndim >= b.ndim:
            _trailing_match("add", a, b)
        else:
            _trailing_match("add", b, a)
    out = a.data + b.data

    def bwd(g):
        _accum(a, _reduce_leading(g, a.shape))
        _accum(b, _reduce_leading(g, b.shape))

    return _node(out, (a, b), bwd)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if a.ndim >= b.ndim:
            _trailing_match("hadamard", a, b)
        else:
            _trailing_match("hadamard", b, a)
    out = a.data * b.data

    def bwd(g):
        _accum(a, _reduce_leading(g * b.data, a.shape))
        _accum(b, _reduce_leading(g * a.data, b.shape))

    return _node(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), bwd)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Prepend-style broadcast: `shape` must end with a's shape."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if len(shape) < a.ndim or shape[len(shape) - a.ndim :] != a.shape:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        _accum(a, _reduce_leading(g, a.shape))

    return _node(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} @ {b.shape}")
    if b.ndim not in (2, a.ndim) or (b.ndim == a.ndim and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: batch dims differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.ndim == a.ndim:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
        else:
            k, n = b.shape
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _node(out, (a, b), bwd)


def linear(a, w, bias) -> Tensor:
    """Affine map on row vectors: a @ w + bias."""
    return add(matmul(a, w), bias)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), bwd)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _node(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(out, tuple(ts), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.shape))

    return _node(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(a, g * (cdf + x * pdf))

    return _node(out, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _node(out, (a, gain, bias), bwd)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: logits must be [batch, classes], got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_logits: labels shape {y.shape} does not match batch {logits.shape[0]}"
        )
    n, c = logits.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"cross_entropy_logits: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), y].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        _accum(logits, (float(g) / n) * p)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            stack.append((node._parents[idx], 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Gradients accumulate with += across fan-out; the traversed graph links
    are freed afterwards, so a graph supports exactly one backward pass.
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:  # leaves keep .grad; interior links are freed
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: tuple[int, tuple[int, ...]] = (0, ())
    checked: int = 0

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {state}: max rel err {self.max_rel_err:.3e} over "
            f"{self.checked} coordinates (tol {self.tol:.1e}, worst input "
            f"{self.worst[0]} at {self.worst[1]})"
        )


def grad_check(f, inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Central differences per coordinate vs backward() for scalar-valued f.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6);
    the floor keeps near-zero coordinates from failing on subtraction noise.
    Run in float64: float32 finite differences are meaningless at tol 1e-4.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    worst = (0, ())
    checked = 0
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = float(f(*inputs).data)
                flat[j] = orig - h
                fm = float(f(*inputs).data)
                flat[j] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(analytic[i].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                checked += 1
                if err > max_err:
                    max_err = err
                    worst = (i, np.unravel_index(j, t.shape) if t.shape else ())
    return GradCheckReport(max_rel_err=max_err, tol=tol, passed=max_err <= tol, worst=worst, checked=checked)


# ---------------------------------------------------------------------------
# parameter checkpoints

CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, "Tensor | np.ndarray"], path) -> None:
    """Write parameters (sorted by name) as magic/version/count + entries.

    Entry: u16 name length, UTF-8 name, u8 rank, u32 dims, f32 LE data.
    """
    names = sorted(params)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(names))]
    for name in names:
        arr = params[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        if data.ndim > 0xFF:
            raise ValueError(f"parameter rank too large: {name!r}")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as {name: float32 array}."""
    r = Reader(Path(path).read_bytes())
    r.expect_magic(CKPT_MAGIC)
    r.expect_version(CKPT_VERSION)
    count = r.unpack("I", "entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.unpack("H", "name length")
        at = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FileFormatError("parameter name is not valid UTF-8", at) from e
        if name in out:
            raise FileFormatError(f"duplicate parameter name {name!r}", at)
        rank = r.unpack("B", "rank")
        dims = tuple(
            struct.unpack(f"<{rank}I", r.take(4 * rank, "dims")) if rank else ()
        )
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * n, f"data for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    r.done()
    return out
