"""Dense-array substrate: a small reverse-mode autodiff engine over numpy.

Every kernel is a pure function producing a new :class:`Tensor`. When grad
recording is enabled and any input requires gradients, the output remembers
its parents and a backward closure; :func:`backward` walks the tape. Kernel
outputs are checked for NaN/Inf on the spot so a numerical blow-up surfaces
at the op that produced it instead of three modules later.

Multiply-accumulate instrumentation lives here too: ``matmul`` reports
m*k*n MACs per batch element to the active :class:`MacCounter`. Backward
passes run on raw numpy and are deliberately uncounted, so measured MACs
always mean forward-pass work.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit


class NumericsError(Exception):
    """Base class for kernel-level failures."""


class ShapeError(NumericsError):
    """Operand shapes (or dtypes) do not line up."""


class NonFiniteError(NumericsError):
    """A kernel produced NaN or Inf."""


# Sentinel marking excluded attention entries. Entries equal to EXCLUDE are
# removed before exponentiation, never added to logits.
EXCLUDE = float("-inf")

LAYERNORM_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# ---------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    """Per-run accumulator of forward multiply-accumulates.

    Counts are additive over kernels; ``by_scope`` attributes each count to
    the innermost active label (see :func:`mac_scope`). Concurrent runs must
    use independent counters.
    """

    def __init__(self):
        self.total = 0
        self.by_scope = {}
        self._labels = []

    def add(self, n):
        self.total += int(n)
        if self._labels:
            label = self._labels[-1]
            self.by_scope[label] = self.by_scope.get(label, 0) + int(n)

    def reset(self):
        self.total = 0
        self.by_scope.clear()

    @contextmanager
    def scope(self, label):
        self._labels.append(label)
        try:
            yield
        finally:
            self._labels.pop()


_active_counter = MacCounter()


def active_counter() -> MacCounter:
    return _active_counter


@contextmanager
def use_mac_counter(counter: MacCounter):
    """Install ``counter`` as the active MAC accumulator inside the block."""
    global _active_counter
    prev = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


def mac_scope(label):
    """Label MACs recorded inside the block (e.g. ``mac_scope("attention")``)."""
    return _active_counter.scope(label)


def measure_macs(run) -> int:
    """Run ``run()`` under a fresh counter and return the MACs it recorded."""
    with use_mac_counter(MacCounter()) as counter:
        run()
    return counter.total


# ---------------------------------------------------------------------------
# Tensor


def _ensure_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense float array with an optional gradient buffer.

    ``data`` is row-major float32 or float64; ``grad`` (same shape) is
    populated by :func:`backward`. Tensors record the op graph only while
    grad mode is on and some input requires gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        arr = arr.astype(dtype if dtype is not None else np.float32, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are cast to the tensor dtype.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NumericsError("tensor/tensor division is not a kernel; divide by scalars")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, dtype=np.float32) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, dtype=dtype, requires_grad=True)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise NumericsError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, op, parents, backward_fn) -> Tensor:
    _ensure_finite(data, op)
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise kernels


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(data, "sub", (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), back)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return _make(y, "sigmoid", (x,), back)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def back(g):
        return (g * (x.data > 0),)

    return _make(y, "relu", (x,), back)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(y.astype(x.dtype, copy=False), "gelu", (x,), back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    b = _coerce(b, a)
    data = np.maximum(a.data, b.data)

    def back(g):
        take_a = a.data >= b.data
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _make(data, "maximum", (a, b), back)


def pointwise(kind: str, *args) -> Tensor:
    """Dispatch by name: sigmoid | gelu | relu | add | mul."""
    table = {"sigmoid": sigmoid, "gelu": gelu, "relu": relu, "add": add, "mul": mul}
    if kind not in table:
        raise NumericsError(f"unknown pointwise kind {kind!r}")
    return table[kind](*args)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product contracting the last axis of ``a`` with the
    second-to-last of ``b``; leading dims broadcast. Records m*k*n MACs per
    batch element."""
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.dtype != b.dtype:
        raise NumericsError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} x {b.shape}") from e
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _active_counter.add(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, "matmul", (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# Softmax over masked rows


def _valid_from_mask(mask, shape):
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    ok = (mask == 0) | np.isneginf(mask)
    if not ok.all():
        raise NumericsError("mask entries must be 0 (valid) or EXCLUDE")
    return np.broadcast_to(mask == 0, shape)


def masked_softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last dim restricted to entries whose mask is 0.

    Excluded entries (mask == EXCLUDE) are replaced before exponentiation
    and output exactly 0, so a row's result is bit-for-bit independent of
    its excluded entries. Rows with no valid entry output all zeros.
    """
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = _valid_from_mask(mask, x.shape)
    neg = np.where(valid, x.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(np.where(valid, x.data, rowmax) - rowmax) * valid
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom == 0.0, 1.0, denom)
    out = out.astype(x.dtype, copy=False)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "masked_softmax", (x,), back)


def exclusion_mask(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Boolean validity -> additive-flag mask array (0 valid, EXCLUDE not)."""
    return np.where(valid, 0.0, EXCLUDE).astype(dtype)


# ---------------------------------------------------------------------------
# Normalization / pooling


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Zero-mean unit-variance over the last dim, then affine."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ShapeError("layer_norm parameter length must match the channel dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        gy = g * gamma.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx.astype(x.dtype, copy=False), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(y.astype(x.dtype, copy=False), "layer_norm", (x, gamma, beta), back)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling over the two middle axes of [b, h, w, c]."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool_2x2 expects [b, h, w, c]")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c),)

    return _make(y, "max_pool_2x2", (x,), back)


# ---------------------------------------------------------------------------
# Shape movement


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _make(data, "reshape", (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def back(g):
        return (g.transpose(inv),)

    return _make(data, "transpose", (x,), back)


def roll2d(x: Tensor, shift_y: int, shift_x: int) -> Tensor:
    """Cyclic roll over axes 1 and 2 of [b, h, w, c]."""
    if x.data.ndim != 4:
        raise ShapeError("roll2d expects [b, h, w, c]")
    data = np.roll(x.data, (shift_y, shift_x), axis=(1, 2))

    def back(g):
        return (np.roll(g, (-shift_y, -shift_x), axis=(1, 2)),)

    return _make(data, "roll2d", (x,), back)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[..., start:stop]

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(data, "slice_lastdim", (x,), back)


def embed_lookup(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, "embed_lookup", (table,), back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by index."""
    if x.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows index out of bounds")
    data = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, "gather_rows", (x,), back)


def scatter_write(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``rows`` written at the (unique) row indices."""
    if base.data.ndim != 2 or rows.data.ndim != 2:
        raise ShapeError("scatter_write expects 2-D tensors")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise ShapeError("scatter_write index out of bounds")
    data = base.data.copy()
    data[idx] = rows.data

    def back(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _make(data, "scatter_write", (base, rows), back)


# ---------------------------------------------------------------------------
# Reductions and losses


def mean_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.dtype)

    def back(g):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)

    return _make(data, "mean_all", (x,), back)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _make(data, "sum_all", (x,), back)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    data = x.data.mean(axis=axis)
    n = x.shape[axis]

    def back(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(data, "mean_axis", (x,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    y = y.astype(logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce targets shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    data = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def back(g):
        return (g * (expit(z) - y),)

    return _make(data.astype(logits.dtype, copy=False), "bce_with_logits", (logits,), back)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [B, K] logits against int class ids."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_logits expects [B, K] logits")
    t = np.asarray(targets)
    n, k = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} != ({n},)")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = np.log(e.sum(axis=1)) + zmax[:, 0]
    data = np.asarray((lse - z[np.arange(n), t]).mean(), dtype=logits.dtype)

    def back(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.astype(logits.dtype),)

    return _make(data, "cross_entropy_logits", (logits,), back)


# ---------------------------------------------------------------------------
# Backward and verification


def backward(loss: Tensor) -> None:
    """Populate grad buffers for every tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise NumericsError("backward requires a scalar loss")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.asarray(1.0, dtype=loss.dtype)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f, params, step: float = 1e-5, max_coords: int = 64, rng=None) -> float:
    """Max relative error between analytic gradients of ``f()`` and central
    finite differences over sampled coordinates of ``params``.

    ``f`` must be deterministic (freeze any noise). Relative error is
    |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    zero_grads(params)
    loss = f()
    backward(loss)
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        if g is None:
            raise NumericsError("finite_diff_check: a parameter received no gradient")
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + step
            with no_grad():
                up = float(f().data)
            flat[c] = keep - step
            with no_grad():
                down = float(f().data)
            flat[c] = keep
            cd = (up - down) / (2.0 * step)
            an = float(g.reshape(-1)[c])
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Fixture file format: magic "SPT1", u32 rank, u32 dims[], f32 LE payload


_MAGIC = b"SPT1"


def save_tensor(path, array) -> None:
    """Write an array in the fixture format (always 32-bit payload)."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(serialize_tensor(arr))


def serialize_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    arr, rest = deserialize_tensor(blob)
    if rest:
        raise NumericsError(f"{path}: trailing bytes after tensor payload")
    return arr


def deserialize_tensor(blob: bytes):
    """Parse one fixture-format tensor; returns (array, remaining bytes)."""
    if blob[:4] != _MAGIC:
        raise NumericsError("bad magic: not a fixture tensor")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = off + 4 * count
    if len(blob) < end:
        raise NumericsError("truncated fixture tensor")
    arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).astype(np.float32)
    return arr, blob[end:]
