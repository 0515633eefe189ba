"""Minimal reverse-mode autodiff on float64 numpy arrays.

Everything trainable in this package runs through this tape: tensors are
immutable after construction, ops record their parents and a backward
closure, and a topological sweep accumulates gradients. All math is 64-bit
so finite-difference checks are tight and runs are bitwise reproducible.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives tensors with incompatible shapes."""


class GraphError(ValueError):
    """Raised for structural problems (non-scalar objective, bad names)."""


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Tensor:
    """A dense float64 array plus the tape bookkeeping for backward().

    Treat instances as immutable after construction; the training loop
    replaces parameter arrays instead of mutating them in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"non-finite values in tensor produced by op '{op}'")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # operator sugar used pervasively by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    """Wrap data as a non-trainable leaf tensor."""
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=False)


def _make(data, op, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        backward = None
        parents = ()
    return Tensor(data, requires_grad=req, op=op, parents=parents, backward=backward)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def backward(out: Tensor):
    """Reverse sweep from a scalar tensor; fills .grad on reachable leaves."""
    if out.data.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {out.data.shape}")
    # iterative topo sort: graphs can be thousands of nodes deep
    topo, visited, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# broadcasting helpers: only leading-batch broadcasting is allowed; anything
# fancier must be spelled out with reshape
# ---------------------------------------------------------------------------

def _bcast_check(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible "
                     "(only leading-batch broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    n_extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(n_extra)))
    return g


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _bcast_check(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _bcast_check(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return scale(constant(a), float(b))
    if isinstance(a, (int, float)):
        return scale(constant(b), float(a))
    a, b = constant(a), constant(b)
    _bcast_check(a, b, "multiply")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _make(out, "multiply", (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = constant(a)
    out = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _make(out, "scale", (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: expected two 2-D or two 3-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions do not agree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    tr = (0, 2, 1) if a.ndim == 3 else (1, 0)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(tr))
        if b.requires_grad:
            _accum(b, a.data.transpose(tr) @ g)

    return _make(out, "matmul", (a, b), bwd)


def transpose(a, axes) -> Tensor:
    a = constant(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(out, "transpose", (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, "reshape", (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out, "concat", tuple(ts), bwd)


def tslice(a, key) -> Tensor:
    """Basic slicing with a tuple of slice objects (steps allowed)."""
    a = constant(a)
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise ShapeError("slice: key must be a tuple of slice objects")
    out = np.ascontiguousarray(a.data[key])

    def bwd(g):
        full = np.zeros(a.shape)
        full[key] = g
        _accum(a, full)

    return _make(out, "slice", (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup table[ids]; ids is a plain integer array, not a tensor."""
    table = constant(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _make(out, "embedding", (table,), bwd)


def softmax(a, bias=None) -> Tensor:
    """Row-stochastic softmax over the last axis.

    `bias` is an optional constant array added to the logits inside the op;
    it may contain -inf to remove keys entirely while outputs stay finite.
    """
    a = constant(a)
    x = a.data if bias is None else a.data + np.asarray(bias, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(a, (g - dot) * out)

    return _make(out, "softmax", (a,), bwd)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Sum over rows of -log softmax(logits)[target]; optional 0/1 row weights.

    Rows with weight zero contribute exactly nothing to the value or the
    gradient, which is what masked-token losses rely on.
    """
    logits = constant(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (rows, classes), got {logits.shape}")
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} does not match rows {logits.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target index out of range")
    w = np.ones(logits.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(x - m), axis=-1))
    rows = np.arange(x.shape[0])
    out = np.sum(w * (lse - x[rows, t]))

    def bwd(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, t] -= 1.0
        _accum(logits, (w[:, None] * p) * g)

    return _make(out, "cross_entropy", (logits,), bwd)


def layer_norm(a, eps=1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = constant(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - xhat * gx))

    return _make(xhat, "layer_norm", (a,), bwd)


def relu(a) -> Tensor:
    a = constant(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, "relu", (a,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """tanh-form GELU."""
    a = constant(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du))

    return _make(out, "gelu", (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accum(a, np.full(a.shape, g))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out, "sum", (a,), bwd)


def tmean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def l1_distance(a, b) -> Tensor:
    """Scalar sum of absolute differences; subgradient 0 at exact ties."""
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes differ: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = np.abs(d).sum()

    def bwd(g):
        s = np.sign(d) * g
        if a.requires_grad:
            _accum(a, s)
        if b.requires_grad:
            _accum(b, -s)

    return _make(out, "l1_distance", (a, b), bwd)


def squared_l2(a, b=None) -> Tensor:
    """Scalar sum of squared differences (or squared norm if b is None)."""
    a = constant(a)
    if b is None:
        d = a.data
        out = np.sum(d * d)

        def bwd(g):
            _accum(a, 2.0 * d * g)

        return _make(out, "squared_l2", (a,), bwd)
    b = constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_l2: shapes differ: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = np.sum(d * d)

    def bwd(g):
        if a.requires_grad:
            _accum(a, 2.0 * d * g)
        if b.requires_grad:
            _accum(b, -2.0 * d * g)

    return _make(out, "squared_l2", (a, b), bwd)


def l2_normalize(a, eps=1e-12) -> Tensor:
    """Normalize rows (last axis) to unit length; zero rows map to zero."""
    a = constant(a)
    nrm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    safe = np.maximum(nrm, eps)
    out = a.data / safe

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        proj = np.where(nrm > eps, dot, 0.0)
        _accum(a, (g - out * proj) / safe)

    return _make(out, "l2_normalize", (a,), bwd)


# ---------------------------------------------------------------------------
# Graph: named parameters + a build function, with gradient and FD checking
# ---------------------------------------------------------------------------

class Graph:
    """A computation over named inputs and named parameters.

    `fn(params, inputs)` receives dicts of Tensors and returns a dict of
    Tensors. Tracing happens on every call, so evaluation is just running
    the function; the recorded tape is the topologically ordered op list.
    """

    def __init__(self, fn, parameters: dict):
        self.fn = fn
        self.parameters = {k: _as_f64(v) for k, v in parameters.items()}

    def _run(self, inputs, trainable):
        pt = {k: Tensor(v, requires_grad=trainable) for k, v in self.parameters.items()}
        it = {k: constant(v) for k, v in (inputs or {}).items()}
        outs = self.fn(pt, it)
        if not isinstance(outs, dict):
            outs = {"out": outs}
        return pt, outs

    def _pick_output(self, outs, name):
        if name is None:
            if len(outs) != 1:
                raise GraphError(f"graph has outputs {sorted(outs)}; pass output=<name>")
            return next(iter(outs.values()))
        if name not in outs:
            raise GraphError(f"unknown output '{name}'; graph has {sorted(outs)}")
        return outs[name]

    def evaluate(self, inputs=None):
        _, outs = self._run(inputs, trainable=False)
        return {k: np.array(v.data) for k, v in outs.items()}

    def gradient(self, inputs=None, wrt=None, output=None):
        pt, outs = self._run(inputs, trainable=True)
        loss = self._pick_output(outs, output)
        if loss.data.size != 1:
            raise GraphError(f"objective '{loss.op}' is not scalar: shape {loss.data.shape}")
        backward(loss)
        names = list(self.parameters) if wrt is None else list(wrt)
        grads = {}
        for name in names:
            if name not in pt:
                raise GraphError(f"unknown parameter '{name}'")
            g = pt[name].grad
            # parameters the objective never touches get a zero gradient
            grads[name] = np.zeros_like(self.parameters[name]) if g is None else g
        return grads

    def finite_difference_check(self, inputs=None, eps=1e-5, wrt=None, output=None):
        """Max relative error between tape gradients and central differences."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        grads = self.gradient(inputs, wrt=wrt, output=output)
        worst = 0.0
        for name, g_ad in grads.items():
            base = self.parameters[name]
            flat = base.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = self._eval_scalar(inputs, output)
                flat[i] = orig - eps
                lo = self._eval_scalar(inputs, output)
                flat[i] = orig
                g_fd = (hi - lo) / (2.0 * eps)
                err = abs(g_ad.ravel()[i] - g_fd) / (abs(g_fd) + 1e-8)
                worst = max(worst, err)
        return worst

    def _eval_scalar(self, inputs, output):
        _, outs = self._run(inputs, trainable=False)
        return self._pick_output(outs, output).data.item()


def evaluate(graph: Graph, inputs=None):
    return graph.evaluate(inputs)


def gradient(graph: Graph, inputs=None, wrt=None, output=None):
    return graph.gradient(inputs, wrt=wrt, output=output)


def finite_difference_check(graph: Graph, inputs=None, eps=1e-5, wrt=None, output=None):
    return graph.finite_difference_check(inputs, eps=eps, wrt=wrt, output=output)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a dict of named parameter arrays (out-of-place updates)."""

    def __init__(self, params: dict, lr=2e-4, betas=(0.9, 0.99), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            self.params[k] = self.params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flat name->array mapping of optimizer state for checkpointing."""
        out = {}
        for k in self.params:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, blobs, t):
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(blobs[f"adam_m/{k}"])
            self.v[k] = np.array(blobs[f"adam_v/{k}"])


# ---------------------------------------------------------------------------
# Tensor blob format: magic "RMTB", u32 rank, u64 extents, f64 LE payload
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"RMTB"


def write_tensor_blob(fh, arr: np.ndarray):
    arr = _as_f64(arr)
    fh.write(BLOB_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        fh.write(struct.pack("<Q", ext))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor_blob(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != BLOB_MAGIC:
        raise ValueError(f"bad tensor blob magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise ValueError("truncated tensor blob")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def tensor_blob_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor_blob(buf, arr)
    return buf.getvalue()
