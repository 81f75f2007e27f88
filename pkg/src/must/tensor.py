"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything numeric in this package flows through the ops below. Values are
row-major numpy arrays (float64 only); each op records the parents it was
built from plus a closure that routes the output gradient back to them, so
calling ``backward`` on a scalar fills ``grad`` on every tensor that
requires it. The op set is deliberately small: 2-D matmul, row/column
slicing and concatenation, row softmax, layer norm, GELU, and the few
elementwise pieces the attention stack needs. No broadcasting beyond row
vectors, no views, no dtype zoo.

Gradient fidelity is checked against central finite differences via
``grad_check``; ``capture_softmax`` exposes every softmax output produced
during a forward pass so attention matrices can be audited.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import DataError

_GRAD_ENABLED = True

_SOFTMAX_OBSERVERS: list = []

CHECKPOINT_MAGIC = b"MUST"
CHECKPOINT_VERSION = 1


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def capture_softmax(sink=None):
    """Collect the output of every softmax_rows call issued in the block.

    Yields the list the row-stochastic matrices are appended to (copies,
    so later graph work cannot mutate them).
    """
    if sink is None:
        sink = []
    _SOFTMAX_OBSERVERS.append(sink)
    try:
        yield sink
    finally:
        _SOFTMAX_OBSERVERS.remove(sink)


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Tensors are immutable once built: ops allocate fresh outputs and never
    write into their inputs. ``requires_grad`` marks trainable leaves;
    tensors produced by ops inherit it from their parents while grad
    recording is enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        topo = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topo_order(root):
    # Iterative DFS: graphs from long windows can exceed the recursion limit.
    order = []
    seen = set()
    stack = [(root, False)]
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


def parameter(data):
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _need(t):
    return t.requires_grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _need(a):
            a._accum(g)
        if _need(b):
            b._accum(g)

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _need(a):
            a._accum(g)
        if _need(b):
            b._accum(-g)

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    """Elementwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _need(a):
            a._accum(g * b.data)
        if _need(b):
            b._accum(g * a.data)

    return _from_op(a.data * b.data, (a, b), backward)


def scale(x, c):
    """Multiply by a python float constant."""
    x = _as_tensor(x)
    c = float(c)

    def backward(g):
        if _need(x):
            x._accum(g * c)

    return _from_op(x.data * c, (x,), backward)


def add_rowvec(x, v):
    """Add a length-n vector to every row of an m-by-n tensor (bias add)."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise ValueError(
            f"add_rowvec: expected (m,n) plus (n,), got {x.data.shape} and {v.data.shape}"
        )

    def backward(g):
        if _need(x):
            x._accum(g)
        if _need(v):
            v._accum(g.sum(axis=0))

    return _from_op(x.data + v.data[None, :], (x, v), backward)


def matmul(a, b):
    """Standard 2-D matrix product with gradients for both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )

    def backward(g):
        if _need(a):
            a._accum(g @ b.data.T)
        if _need(b):
            b._accum(a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), backward)


def transpose(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got {x.data.shape}")

    def backward(g):
        if _need(x):
            x._accum(g.T)

    return _from_op(np.ascontiguousarray(x.data.T), (x,), backward)


def concat_rows(parts):
    """Stack 2-D tensors with equal column counts along the row axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: empty input")
    cols = parts[0].data.shape[1] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ValueError(
                f"concat_rows: inconsistent shapes {[q.data.shape for q in parts]}"
            )
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _need(p):
                p._accum(g[lo:hi])

    return _from_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def concat_cols(parts):
    """Stack 2-D tensors with equal row counts along the column axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols: empty input")
    rows = parts[0].data.shape[0] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ValueError(
                f"concat_cols: inconsistent shapes {[q.data.shape for q in parts]}"
            )
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _need(p):
                p._accum(g[:, lo:hi])

    return _from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def slice_rows(x, start, stop):
    x = _as_tensor(x)
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[0]):
        raise ValueError(
            f"slice_rows: bad range [{start}:{stop}] for shape {x.data.shape}"
        )

    def backward(g):
        if _need(x):
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x._accum(full)

    return _from_op(x.data[start:stop].copy(), (x,), backward)


def slice_cols(x, start, stop):
    x = _as_tensor(x)
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ValueError(
            f"slice_cols: bad range [{start}:{stop}] for shape {x.data.shape}"
        )

    def backward(g):
        if _need(x):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x._accum(full)

    return _from_op(x.data[:, start:stop].copy(), (x,), backward)


def sum_all(x):
    """Sum every entry into a scalar tensor."""
    x = _as_tensor(x)

    def backward(g):
        if _need(x):
            x._accum(np.full_like(x.data, float(g)))

    return _from_op(np.float64(x.data.sum()), (x,), backward)


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        if _need(x):
            x._accum(np.full_like(x.data, float(g) / n))

    return _from_op(np.float64(x.data.mean()), (x,), backward)


# ---------------------------------------------------------------------------
# nonlinear ops


def softmax_rows(x):
    """Row-wise softmax with per-row max subtraction for stability.

    Every output is also handed (as a copy) to active capture_softmax
    sinks, which is how the attention-stochasticity audit observes the
    attention matrices.
    """
    x = _as_tensor(x)
    z = x.data
    if z.ndim != 2:
        raise ValueError(f"softmax_rows: expected 2-D, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    for sink in _SOFTMAX_OBSERVERS:
        sink.append(s.copy())

    def backward(g):
        if _need(x):
            inner = (g * s).sum(axis=1, keepdims=True)
            x._accum(s * (g - inner))

    return _from_op(s, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    z = x.data
    n = z.shape[1]
    if z.ndim != 2 or gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ValueError(
            f"layer_norm: shapes {z.shape}, {gamma.data.shape}, {beta.data.shape}"
        )
    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data[None, :] + beta.data[None, :]

    def backward(g):
        if _need(gamma):
            gamma._accum((g * xhat).sum(axis=0))
        if _need(beta):
            beta._accum(g.sum(axis=0))
        if _need(x):
            dxhat = g * gamma.data[None, :]
            # standard layer-norm backward, var uses the population estimate
            term = dxhat - dxhat.mean(axis=1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accum(term * inv)

    return _from_op(out, (x, gamma, beta), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Smooth GELU (tanh approximation)."""
    x = _as_tensor(x)
    z = x.data
    u = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(u)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        if _need(x):
            du = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
            dz = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
            x._accum(g * dz)

    return _from_op(out, (x,), backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        if _need(x):
            x._accum(g * mask)

    return _from_op(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f, params, h=1e-5):
    """Worst relative error between reverse-mode and central differences.

    ``f`` is a zero-argument callable that rebuilds the computation and
    returns a scalar tensor; ``params`` are the leaves to probe. Every
    coordinate of every parameter is perturbed by +-h; the relative error
    denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"grad_check: h={h} outside [1e-6, 1e-4]")
    for p in params:
        p.zero_grad()
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
    out = f()
    if out.data.size != 1:
        raise ValueError(
            f"grad_check: computation must be scalar-valued, got shape {out.data.shape}"
        )
    out.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = gflat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
    return worst


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, params):
    """Write named tensors to the flat binary checkpoint container.

    Layout: magic "MUST", version u32, then per parameter: name length
    (u32), name bytes, rank (u32), extents (u64 each), float64 payload.
    All integers and floats little-endian; records are name-sorted so the
    same parameters always produce the same bytes.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            value = params[name]
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f8"
            )
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of float64 arrays."""
    params = {}
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    total = len(blob)
    while off < total:
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated checkpoint record: {exc}") from exc
        params[name] = arr.astype(np.float64)
    return params
