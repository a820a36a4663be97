"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of ops a small transformer and attention pooling need are
provided. There is deliberately no general broadcasting: elementwise ops
demand identical shapes, bias rows are added with :func:`add_bias`, and masks
are the only broadcast operand (``softmax`` and ``masked_fill``).
"""

from __future__ import annotations

import io
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SERIAL_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    """An immutable float64 array plus the record of how it was produced."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data.view()
        else:
            arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite values in tensor produced by {op!r}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the checked ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, False, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b) -> Tensor:
    """``x + b`` with ``b`` a single row matching the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    n = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def mul_bias(x, w) -> Tensor:
    """``x * w`` with ``w`` a single row matching the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 1 or x.shape[-1:] != w.shape:
        raise ShapeError(f"mul_bias: shape mismatch {x.shape} vs {w.shape}")
    n = w.shape[0]
    xd, wd = x.data, w.data
    return _result(
        xd * wd, (x, w), lambda g: (g * wd, (g * xd).reshape(-1, n).sum(axis=0)), "mul_bias"
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so finite differences behave)."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(y, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across every leading batch index of ``a``) or
    has exactly the batch shape of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    old = x.shape
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no tensors")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def take_rows(x, index) -> Tensor:
    """Select entries along axis 0 (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")

    def backward(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), backward, "take_rows")


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V, d) for an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    flat = ids.reshape(-1)

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, flat, g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % x.ndim
    return _result(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
        "sum",
    )


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# normalizers, masking
# ---------------------------------------------------------------------------


def _broadcast_mask(mask, shape, op):
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(f"{op}: mask shape {mask.shape} not broadcastable to {shape}") from None


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with ``value``."""
    x = as_tensor(x)
    m = _broadcast_mask(mask, x.shape, "masked_fill")
    return _result(np.where(m, value, x.data), (x,), lambda g: (np.where(m, 0.0, g),), "masked_fill")


def softmax(x, mask=None) -> Tensor:
    """Stable softmax over the last axis.

    With ``mask`` (true = keep), excluded entries get exactly zero weight and
    the rest renormalize; a row with nothing kept is all zeros.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = _broadcast_mask(mask, x.shape, "softmax")
        shifted = np.where(m, xd, -np.inf)
        mx = shifted.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(m, np.exp(np.where(m, xd, mx) - mx), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (x,), backward, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean (optionally weighted) negative log-likelihood from raw logits.

    ``logits`` is (N, C); ``labels`` holds N class indices.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if y.shape[0] != n:
        raise ShapeError(f"cross_entropy: shape mismatch {logits.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"cross_entropy: label out of range for {c} classes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), y]
    total = w.sum()
    loss = float((w * nll).sum() / total)
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (g * d * (w / total)[:, None],)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tensor that requires grad.

    When ``params`` is given the result holds exactly those tensors, with
    zeros for any that the loss does not depend on.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    order = _topological(loss) if loss.requires_grad else []
    if order:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if params is None:
        return {n: grads[id(n)] for n in order if not n._parents and id(n) in grads}
    return {p: grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for p in params}


def grad_check(
    function: Callable[[list[Tensor]], Tensor],
    point: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    ``function`` maps a list of tensors to a scalar tensor. The analytic side
    comes from :func:`backward` unless ``analytic`` supplies it.
    """
    base = [np.array(p, dtype=np.float64) for p in point]
    if analytic is None:
        leaves = [Tensor(p, requires_grad=True) for p in base]
        g = backward(function(leaves), leaves)
        analytic = [g[t] for t in leaves]
    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[i], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = function([Tensor(q) for q in base]).item()
            flat[j] = orig - epsilon
            fm = function([Tensor(q) for q in base]).item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * epsilon)
            err = abs(a_flat[j] - num) / max(1e-8, abs(a_flat[j]) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def dump_params(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    """Flat little-endian container: version byte, count, then (name, shape, values)."""
    buf = io.BytesIO()
    buf.write(struct.pack("<B", SERIAL_VERSION))
    buf.write(struct.pack("<Q", len(params)))
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def load_params(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if len(view) < 9:
        raise ValueError("parameter blob truncated")
    (version,) = struct.unpack_from("<B", view, 0)
    if version != SERIAL_VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    (count,) = struct.unpack_from("<Q", view, 1)
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<Q", view, off)
            off += 8
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<Q", view, off)
            off += 8
            shape = struct.unpack_from(f"<{ndim}Q", view, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            out[name] = arr.reshape(shape)
    except struct.error as exc:
        raise ValueError("parameter blob truncated") from exc
    if off != len(view):
        raise ValueError("trailing bytes after parameter blob")
    return out
