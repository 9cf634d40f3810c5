"""Minimal reverse-mode autodiff over dense numpy arrays.

Provides exactly the tensor operations the cognate models need: elementwise
arithmetic, matmul, tanh, softmax, reductions, embedding lookup, 1-d
convolution, and the three losses (MSE, KL divergence, unsupervised
clustering terms are composed from these). Gradients are analytic and are
verified against central finite differences in the test suite.

Float32 is the working precision; the gradient-check harness builds float64
graphs for a quieter finite-difference baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Rng",
    "ShapeError", "PreconditionError", "NumericError", "StateError",
    "CheckpointError",
    "tensor", "add", "sub", "mul", "div", "neg", "matmul", "tanh", "exp",
    "log", "sqrt", "square", "tsum", "tmean", "tmax", "softmax",
    "softmax_rows", "cosine_rows", "concat",
    "gather_rows", "reshape", "mse", "kl_div", "cosine", "conv1d",
    "sgd_step", "zero_grads", "uniform_param",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class PreconditionError(ValueError):
    """An operation's documented precondition was violated."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the contract forbids it."""


class StateError(RuntimeError):
    """Operation invoked out of order (e.g. backward without a graph)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or incompatible."""


def _check_finite(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced")
    return arr


class Tensor:
    """Dense array node in the autodiff graph.

    ``data`` is immutable by convention once the node participates in a
    forward pass; only ``grad`` buffers and leaf parameter values (via
    ``sgd_step``) are mutated.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, _parents=(), _bw=None):
        self.data = _check_finite(np.asarray(data))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def backward(self):
        """Reverse-mode pass seeding d(self)/d(self) = 1.

        ``self`` must be a scalar (size-1) node that depends on at least one
        tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise PreconditionError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise StateError("backward() on a graph with no trainable inputs")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._bw is None:
                continue
            node._bw(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes in reverse topological order (root first), iteratively."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    """Leaf tensor. Defaults to float32."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _node(data, parents, bw) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _bw=bw if req else None)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out_data, (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * y))


def log(a: Tensor) -> Tensor:
    y = np.log(a.data)
    return _node(y, (a,), lambda g: _accum(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / np.maximum(y, np.finfo(y.dtype).tiny))

    return _node(y, (a,), bw)


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: _accum(a, g * 2.0 * a.data))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _node(out_data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims),
               Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; backward routes to the first argmax (subgradient)."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.max(a.data, axis=axis)

    def bw(g):
        buf = np.zeros_like(a.data)
        grid = np.indices(out_data.shape)
        full = list(grid)
        full.insert(axis % a.ndim, idx)
        buf[tuple(full)] = g
        _accum(a, buf)

    return _node(out_data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), bw)


def softmax_rows(logits: Tensor) -> Tensor:
    """Softmax over the last axis (each row of an N x K matrix)."""
    return softmax(logits, axis=-1)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(out_data, tuple(tensors), bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, buf)

    return _node(out_data, (table,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)
    return _node(out_data, (a,), lambda g: _accum(a, g.reshape(a.shape)))


def _getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        _accum(a, buf)

    return _node(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# model-level composites


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Squared error summed over features, averaged over the batch axis.

    For rank >= 2 inputs the batch axis is axis 0; rank-0/1 inputs are one
    sample.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    n = a.shape[0] if a.ndim >= 2 else 1
    d = square(sub(a, b))
    return mul(tsum(d), Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


KL_EPS = 1e-10


def kl_div(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """sum_ij p * log(p / q) with 0*log(0/q) = 0 and q clamped at ``eps``."""
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: {p.shape} vs {q.shape}")
    pd = p.data
    qc = np.maximum(q.data, eps)
    mask = pd > 0
    terms = np.where(mask, pd * np.log(np.where(mask, pd, 1.0) / qc), 0.0)
    out_data = terms.sum(dtype=pd.dtype)

    def bw(g):
        _accum(p, g * np.where(mask, np.log(np.where(mask, pd, 1.0) / qc) + 1.0, 0.0))
        _accum(q, g * np.where((q.data >= eps) & mask, -pd / qc, 0.0))

    return _node(out_data, (p, q), bw)


COSINE_EPS = 1e-12


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; 0 when both are zero."""
    if u.shape != v.shape:
        raise ShapeError(f"cosine: {u.shape} vs {v.shape}")
    eps = Tensor(np.asarray(COSINE_EPS, dtype=u.data.dtype))
    num = tsum(mul(u, v))
    den = add(mul(sqrt(tsum(square(u))), sqrt(tsum(square(v)))), eps)
    return div(num, den)


def cosine_rows(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity for [N, D] inputs; returns [N, 1]."""
    eps = Tensor(np.asarray(COSINE_EPS, dtype=u.data.dtype))
    num = tsum(mul(u, v), axis=1, keepdims=True)
    nu = sqrt(tsum(square(u), axis=1, keepdims=True))
    nv = sqrt(tsum(square(v), axis=1, keepdims=True))
    return div(num, add(mul(nu, nv), eps))


def conv1d(inp: Tensor, filters: Tensor, bias: Tensor, activation=tanh) -> Tensor:
    """Sliding-window 1-d convolution over a character-embedding sequence.

    ``inp`` is [T, d] or [B, T, d]; ``filters`` is [n_filters, k, d];
    ``bias`` is [n_filters]. Output is [(T-k+1), n] (or batched), passed
    through ``activation`` (identity if None).
    """
    squeeze = inp.ndim == 2
    x = reshape(inp, (1,) + inp.shape) if squeeze else inp
    if x.ndim != 3 or filters.ndim != 3:
        raise ShapeError("conv1d expects [B,T,d] input and [n,k,d] filters")
    n_f, k, d = filters.shape
    T = x.shape[1]
    if x.shape[2] != d:
        raise ShapeError(f"conv1d: input depth {x.shape[2]} != filter depth {d}")
    if bias.shape != (n_f,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({n_f},)")
    if T < k:
        raise PreconditionError(f"conv1d: sequence length {T} < filter width {k}")
    L = T - k + 1
    out = None
    for j in range(k):
        w_j = reshape(filters[:, j, :], (n_f, d))
        part = matmul(x[:, j:j + L, :], _transpose2(w_j))
        out = part if out is None else add(out, part)
    out = add(out, reshape(bias, (1, 1, n_f)))
    if activation is not None:
        out = activation(out)
    return reshape(out, out.shape[1:]) if squeeze else out


def _transpose2(a: Tensor) -> Tensor:
    out_data = a.data.T
    return _node(out_data, (a,), lambda g: _accum(a, g.T))


# ---------------------------------------------------------------------------
# parameters, rng, optimizer


@dataclass
class Parameter:
    """Named trainable (or frozen) tensor."""
    name: str
    value: Tensor
    trainable: bool = True


class Rng:
    """Seeded PCG64 generator; identical seed gives identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(np.float32)

    def normal(self, loc, scale, shape) -> np.ndarray:
        return self._gen.normal(loc, scale, shape).astype(np.float32)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def shuffle(self, seq: list):
        self._gen.shuffle(seq)

    def spawn(self, stream: int) -> "Rng":
        return Rng((self.seed * 1_000_003 + stream) % (2 ** 63))


def uniform_param(name: str, shape: tuple, fan_in: int, rng: Rng,
                  trainable: bool = True) -> Parameter:
    """Uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    val = tensor(rng.uniform(-bound, bound, shape), requires_grad=trainable)
    return Parameter(name, val, trainable)


def zero_grads(params: dict[str, Parameter]):
    for p in params.values():
        p.value.grad = None


def sgd_step(params: dict[str, Parameter], lr: float, epoch: int = 0,
             decay: float = 1.0, weight_decay: float = 0.0):
    """p <- p - lr*decay^epoch * grad; grads are zeroed afterwards."""
    lr_e = lr * (decay ** epoch)
    for p in params.values():
        if not p.trainable or p.value.grad is None:
            continue
        g = p.value.grad
        if weight_decay:
            g = g + weight_decay * p.value.data
        p.value.data -= (lr_e * g).astype(p.value.data.dtype)
        _check_finite(p.value.data)
    zero_grads(params)


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"WSCD"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    """Serialize named float32 arrays, lexicographic name order, little-endian."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("B", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(blob) < 5 or blob[4] != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(blob[pos:pos + nlen]) != nlen:
                raise CheckpointError("truncated checkpoint")
            pos += nlen
            (rank,) = struct.unpack_from("B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims).copy()
            out[name] = arr
            pos = end
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(loss_fn, leaves: list[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must rebuild the forward graph from the current leaf
    values each call. Leaves should be float64 for a quiet baseline.
    """
    for t in leaves:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in leaves]
    worst = 0.0
    for t, an in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = an.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a) + abs(num), 1e-6)
            worst = max(worst, rel)
    return worst
