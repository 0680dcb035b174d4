"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy buffer and remembers how it was made;
`backward` replays the recorded graph once in reverse topological order.
Everything runs in double precision so finite-difference checks are
meaningful (see `grad_check`).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "parents", "_backward", "node_id")

    def __init__(self, data, parents=(), backward=None):
        # ascontiguousarray would promote 0-d scalars to 1-d, so guard it
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.parents = parents if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def backward(self, leaves=()):
        backward(self, leaves)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.node_id})"

    # Small operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t, g):
    # first contribution copies; later ones add in place
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


@dataclass
class GradientGraph:
    """Topologically ordered nodes reachable from one root (leaves first)."""

    nodes: list

    @classmethod
    def trace(cls, root):
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                nodes.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(nodes)


def backward(loss, leaves=()):
    """Fill .grad on every node reachable from the scalar `loss`.

    `leaves` not on any path to the loss get a zero gradient buffer so
    optimizers can treat every parameter uniformly.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = GradientGraph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(a.data + b.data, (a, b), bwd)


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor(a.data - b.data, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor(a.data * b.data, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        _accum(a, c * g)

    return Tensor(a.data * c, (a,), bwd)


def add_scalar(a, c):
    c = float(c)

    def bwd(g):
        _accum(a, g)

    return Tensor(a.data + c, (a,), bwd)


def add_rowvec(m, v):
    """Add a length-c vector to every row of an n-by-c matrix (bias add)."""
    if m.ndim != 2 or v.data.shape != (m.shape[1],):
        raise DimensionError(f"add_rowvec: matrix {m.shape} vs vector {v.shape}")

    def bwd(g):
        _accum(m, g)
        _accum(v, g.sum(axis=0))

    return Tensor(m.data + v.data[None, :], (m, v), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return Tensor(np.where(mask, a.data, 0.0), (a,), bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out_data))

    return Tensor(out_data, (a,), bwd)


def transpose(a):
    def bwd(g):
        _accum(a, g.T)

    return Tensor(a.data.T, (a,), bwd)


def concat_cols(parts):
    widths = [p.shape[1] for p in parts]
    stops = np.cumsum(widths)

    def bwd(g):
        for p, lo, hi in zip(parts, np.concatenate([[0], stops[:-1]]), stops):
            _accum(p, g[:, lo:hi])

    return Tensor(np.hstack([p.data for p in parts]), tuple(parts), bwd)


def concat_rows(parts):
    heights = [p.shape[0] for p in parts]
    stops = np.cumsum(heights)

    def bwd(g):
        for p, lo, hi in zip(parts, np.concatenate([[0], stops[:-1]]), stops):
            _accum(p, g[lo:hi])

    return Tensor(np.vstack([p.data for p in parts]), tuple(parts), bwd)


def gather_rows(m, idx):
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        if m.grad is None:
            m.grad = np.zeros_like(m.data)
        np.add.at(m.grad, idx, g)

    return Tensor(m.data[idx], (m,), bwd)


def tile_rows(m, reps):
    """Stack `reps` copies of m (copy-major: copy 0 rows, then copy 1, ...)."""
    n = m.shape[0]

    def bwd(g):
        _accum(m, g.reshape(reps, n, -1).sum(axis=0))

    return Tensor(np.tile(m.data, (reps, 1)), (m,), bwd)


def group_mean_rows(m, groups):
    """Mean over `groups` copy-major copies: (g*n, c) -> (n, c)."""
    if m.shape[0] % groups != 0:
        raise ContractError(
            f"group_mean_rows: {m.shape[0]} rows not divisible by {groups}"
        )
    n = m.shape[0] // groups

    def bwd(g):
        _accum(m, np.tile(g / groups, (groups, 1)))

    return Tensor(m.data.reshape(groups, n, -1).mean(axis=0), (m,), bwd)


def group_max_rows(m, group_size):
    """Max over consecutive blocks of `group_size` rows: (n*k, c) -> (n, c).

    Gradient routes to the first maximal row of each block.
    """
    if m.shape[0] % group_size != 0:
        raise ContractError(
            f"group_max_rows: {m.shape[0]} rows not divisible by {group_size}"
        )
    n = m.shape[0] // group_size
    blocks = m.data.reshape(n, group_size, -1)
    winners = blocks.argmax(axis=1)  # first max on ties

    def bwd(g):
        gm = np.zeros_like(m.data).reshape(n, group_size, -1)
        rows = np.arange(n)[:, None]
        cols = np.arange(m.shape[1])[None, :]
        gm[rows, winners, cols] = g
        _accum(m, gm.reshape(m.shape))

    return Tensor(blocks.max(axis=1), (m,), bwd)


def sum_all(a):
    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return Tensor(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.size)


def sum_cols(m):
    """Row sums of a matrix: (n, c) -> (n,)."""

    def bwd(g):
        _accum(m, np.broadcast_to(g[:, None], m.shape))

    return Tensor(m.data.sum(axis=1), (m,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and point-set kernels
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {a.shape} x {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), bwd)


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction for stability."""
    if not np.isfinite(m.data).all():
        raise NumericError("softmax_rows requires finite input")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / exps.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=1, keepdims=True)
        _accum(m, out_data * (g - inner))

    return Tensor(out_data, (m,), bwd)


def pairwise_sqdist(a, b):
    """All squared Euclidean distances between rows of a and rows of b."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqdist: {a.shape} vs {b.shape}")
    out_data = _sqdist_matrix(a.data, b.data)

    def bwd(g):
        _accum(a, 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data))
        _accum(b, 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data))

    return Tensor(out_data, (a, b), bwd)


def _sqdist_matrix(a, b, chunk=2048):
    """Direct (a_i - b_j)^2 sums, chunked over rows to bound memory."""
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def min_rows(m):
    """Row minima of a matrix: (n, c) -> (n,); ties pick the first column."""
    winners = m.data.argmin(axis=1)
    rows = np.arange(m.shape[0])

    def bwd(g):
        if m.grad is None:
            m.grad = np.zeros_like(m.data)
        m.grad[rows, winners] += g

    return Tensor(m.data[rows, winners], (m,), bwd)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class Linear:
    """One dense layer: weight (d_in, d_out) and bias (d_out,)."""

    weight: Tensor
    bias: Tensor


def mlp_forward(layers, x):
    """Apply a layer list to each row of x; ReLU on all but the final layer.

    Pointwise by construction: row i of the output depends only on row i
    of the input.
    """
    h = x
    for i, layer in enumerate(layers):
        h = add_rowvec(matmul(h, layer.weight), layer.bias)
        if i + 1 < len(layers):
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(f, inputs, eps=1e-5):
    """Max relative disagreement between backprop and central differences.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). Reports, never throws.
    """
    zero_grads(inputs)
    loss = f(*inputs)
    backward(loss, leaves=inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f(*inputs).data)
                flat[i] = orig - eps
                down = float(f(*inputs).data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                worst = max(worst, err)
    return worst
