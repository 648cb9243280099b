"""Dense float tensors with reverse-mode automatic differentiation.

Values are stored row-major in numpy arrays (float32 for training paths,
float64 for metric/test paths). Every operation records its parents and a
backward closure on a dynamic tape; `backward()` walks the tape in reverse
topological order, which is deterministic because it follows creation order.

There is deliberately no general broadcasting: each op documents the exact
shapes it accepts and raises `DimensionError` otherwise, so that every
backward rule can be audited against its forward rule line by line.
"""

import numpy as np

from ..errors import ContractError, DimensionError
from . import kernels


class Tensor:
    """A leaf or intermediate node of the differentiation graph.

    Tensors are immutable from the graph's point of view: ops return new
    tensors and never write into `data` of their inputs. The training loop
    owns parameter tensors and updates `data` in place between graph builds.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g):
        # First consumer aliases the incoming buffer (backward closures
        # never mutate what they hand over); a second consumer forces a
        # fresh allocation so aliased buffers stay read-only.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Reverse-mode sweep seeded with d(self)/d(self) = 1.

        `self` must be scalar-valued. Gradients accumulate into `.grad` of
        every reachable tensor with `requires_grad=True`.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar for the handful of binary ops; shapes must match exactly.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _topo_order(root):
    """Iterative DFS topological sort; order is a pure function of the graph."""
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


def tensor(data, requires_grad=False, dtype=np.float32):
    """Build a leaf tensor from array-like data."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _needs(*ts):
    return any(t.requires_grad or t._parents for t in ts)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: dtype {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b) if _needs(a, b) else ())

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(g)
    if out._parents:
        out._backward = bwd
    return out


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, _parents=(a, b) if _needs(a, b) else ())

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(-g)
    if out._parents:
        out._backward = bwd
    return out


def mul(a, b):
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b) if _needs(a, b) else ())

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(g * b.data)
        if b.requires_grad or b._parents:
            b._accumulate(g * a.data)
    if out._parents:
        out._backward = bwd
    return out


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype),
                 _parents=(a,) if _needs(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g * s)
    return out


def add_scalar(a, s):
    s = float(s)
    out = Tensor(a.data + np.asarray(s, dtype=a.data.dtype),
                 _parents=(a,) if _needs(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g)
    return out


def silu(a):
    """Smooth gated unit x*sigmoid(x); differentiable everywhere."""
    y, sig = kernels.silu_forward(a.data)
    out = Tensor(y, _parents=(a,) if _needs(a) else ())

    def bwd(g):
        a._accumulate(kernels.silu_backward(g, a.data, sig))
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape), _parents=(a,) if _needs(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g.reshape(a.data.shape))
    return out


def transpose(a, axes):
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {a.data.ndim}")
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)),
                 _parents=(a,) if _needs(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(np.ascontiguousarray(g.transpose(inv)))
    return out


def concat_last(parts):
    """Concatenate along the last axis; all leading dims must agree."""
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading dims {p.data.shape[:-1]} vs {lead}")
    widths = [p.data.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1),
                 _parents=tuple(parts) if _needs(*parts) else ())

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad or p._parents:
                p._accumulate(np.ascontiguousarray(g[..., off:off + w]))
            off += w
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None):
    out = Tensor(np.sum(a.data, axis=axis, keepdims=False),
                 _parents=(a,) if _needs(a) else ())

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    if out._parents:
        out._backward = bwd
    return out


def mean_(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """2-D by 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b) if _needs(a, b) else ())

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            b._accumulate(a.data.T @ g)
    if out._parents:
        out._backward = bwd
    return out


def bmm(a, b):
    """Stacked matrix product; leading dims of a and b must be identical."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or \
            a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"bmm: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b) if _needs(a, b) else ())

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))
    if out._parents:
        out._backward = bwd
    return out


def project(x, w):
    """Right-multiply the last axis: (..., k) @ (k, m) -> (..., m)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"project: {x.data.shape} @ {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = reshape(x, (-1, x.data.shape[-1]))
    return reshape(matmul(x2, w), lead + (w.data.shape[1],))


def add_bias(x, b):
    """Add a vector to the last axis of x."""
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[-1]:
        raise DimensionError(f"add_bias: {x.data.shape} + {b.data.shape}")
    out = Tensor(x.data + b.data, _parents=(x, b) if _needs(x, b) else ())

    def bwd(g):
        if x.requires_grad or x._parents:
            x._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(g.reshape(-1, b.data.shape[0]).sum(axis=0))
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    """Shift-invariant softmax along one axis."""
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,) if _needs(x) else ())

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        x._accumulate((g - dot) * y)
    if out._parents:
        out._backward = bwd
    return out


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean/unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm: gain {gain.data.shape} bias {bias.data.shape} for width {d}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    y2, xhat, inv = kernels.layernorm_forward(x2, gain.data, bias.data, eps)
    out = Tensor(y2.reshape(x.data.shape),
                 _parents=(x, gain, bias) if _needs(x, gain, bias) else ())

    def bwd(g):
        g2 = g.reshape(-1, d)
        if gain.requires_grad or gain._parents:
            gain._accumulate(np.einsum("nc,nc->c", g2, xhat))
        if bias.requires_grad or bias._parents:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad or x._parents:
            gx = kernels.layernorm_backward(g2, xhat, inv, gain.data)
            x._accumulate(gx.reshape(x.data.shape))
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# lookup
# ---------------------------------------------------------------------------

def embedding(table, ids):
    """Gather rows of a (V, d) table; ids is any integer array."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table shape {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"embedding: index out of range for vocab {table.data.shape[0]}")
    out = Tensor(table.data[ids], _parents=(table,) if _needs(table) else ())

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(gt)
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# grid ops (channels-last: B, H, W, C)
# ---------------------------------------------------------------------------

def conv3x3(x, w, bias=None):
    """Same-padded 3x3 convolution over a (B, H, W, Cin) grid.

    Weight layout is (3, 3, Cin, Cout). Dispatches to the compiled kernel
    when available, otherwise to the im2col fallback (see kernels package).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv3x3: input shape {x.data.shape}")
    if w.data.shape[:2] != (3, 3) or w.data.shape[2] != x.data.shape[3]:
        raise DimensionError(f"conv3x3: weight {w.data.shape} vs input {x.data.shape}")
    y, ctx = kernels.conv3x3_forward(x.data, w.data)
    parents = [x, w]
    if bias is not None:
        if bias.data.shape != (w.data.shape[3],):
            raise DimensionError(f"conv3x3: bias shape {bias.data.shape}")
        y = y + bias.data
        parents.append(bias)
    out = Tensor(y, _parents=tuple(parents) if _needs(*parents) else ())

    def bwd(g):
        need_gx = x.requires_grad or x._parents
        need_gw = w.requires_grad or w._parents
        gx, gw = kernels.conv3x3_backward(ctx, x.data, w.data, g, need_gx, need_gw)
        if need_gx:
            x._accumulate(gx)
        if need_gw:
            w._accumulate(gw)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g.sum(axis=(0, 1, 2)))
    if out._parents:
        out._backward = bwd
    return out


def add_example_bias(x, r):
    """Add a per-example channel vector r (B, C) across a (B, H, W, C) grid."""
    if x.data.ndim != 4 or r.data.ndim != 2 or \
            r.data.shape != (x.data.shape[0], x.data.shape[3]):
        raise DimensionError(f"add_example_bias: {x.data.shape} + {r.data.shape}")
    out = Tensor(x.data + r.data[:, None, None, :],
                 _parents=(x, r) if _needs(x, r) else ())

    def bwd(g):
        if x.requires_grad or x._parents:
            x._accumulate(g)
        if r.requires_grad or r._parents:
            r._accumulate(g.sum(axis=(1, 2)))
    if out._parents:
        out._backward = bwd
    return out


def avgpool2x2(x):
    """Mean over non-overlapping 2x2 spatial blocks."""
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x2: odd spatial dims {x.data.shape}")
    y = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    out = Tensor(y, _parents=(x,) if _needs(x) else ())

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.asarray(0.25, x.data.dtype)
        x._accumulate(gx)
    if out._parents:
        out._backward = bwd
    return out


def upsample2x(x):
    """Nearest-neighbour doubling of both spatial axes."""
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = Tensor(y, _parents=(x,) if _needs(x) else ())

    def bwd(g):
        b, h2, w2, c = g.shape
        gx = g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        x._accumulate(gx)
    if out._parents:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q, k, v):
    """Scaled dot-product attention for 2-D q (n,d), k (m,d), v (m,dv).

    Each output row is softmax(q.k^T / sqrt(d)) applied to the rows of v,
    i.e. a convex combination of value rows.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError(
            f"attention: expected 2-D q/k/v, got {q.data.shape}/{k.data.shape}/{v.data.shape}")
    if q.data.shape[1] != k.data.shape[1]:
        raise DimensionError(f"attention: q {q.data.shape} vs k {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"attention: k {k.data.shape} vs v {v.data.shape}")
    d = q.data.shape[1]
    scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def attention_heads(q, k, v, heads):
    """Multi-head attention on stacked inputs q (B,n,d), k/v (B,m,d).

    The width d is split into `heads` equal slices; outputs are re-merged to
    (B, n, d). Built from bmm/softmax primitives so gradients come for free.
    """
    bsz, n, d = q.data.shape
    m = k.data.shape[1]
    if d % heads:
        raise DimensionError(f"attention_heads: width {d} not divisible by {heads}")
    if k.data.shape != (bsz, m, d) or v.data.shape != (bsz, m, d):
        raise DimensionError(
            f"attention_heads: q {q.data.shape} k {k.data.shape} v {v.data.shape}")
    dk = d // heads
    qh = transpose(reshape(q, (bsz, n, heads, dk)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (bsz, m, heads, dk)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (bsz, m, heads, dk)), (0, 2, 1, 3))
    att = softmax(scale(bmm(qh, kh), 1.0 / np.sqrt(dk)), axis=-1)
    out = bmm(att, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (bsz, n, d))
