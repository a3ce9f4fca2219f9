"""Dense-tensor reverse-mode automatic differentiation.

A deliberately small define-by-run engine: each operation computes its
forward value with numpy and registers a closure that propagates adjoints
to its parents. `backward` topologically sorts the implicit graph from the
loss and visits every node exactly once, accumulating gradients additively
into leaf tensors.

Conventions:
- float32 is the training dtype, float64 the gradient-check dtype; mixing
  dtypes inside one graph is an error.
- Broadcasting is restricted to leading dimensions (a bias of shape [d]
  may be added to [n, d]); anything fancier is rejected so every backward
  rule stays auditable.
- A graph is confined to the thread that built it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "set_debug",
    "add",
    "scale",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "gather_rows",
    "scatter_rows",
    "concat_rows",
    "tile_rows",
    "gather_tokens",
    "scatter_tokens",
    "slice_tokens",
    "concat_tokens",
    "fill_tokens",
    "layer_norm",
    "gelu",
    "softmax",
    "attention",
    "mean",
    "tsum",
    "mse",
    "cross_entropy_with_logits",
    "backward",
    "topo_order",
    "gradient_check",
    "GradCheckReport",
]

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf detection after every forward op (slow; for tests)."""
    global _DEBUG
    _DEBUG = bool(flag)


class ShapeError(ValueError):
    pass


_seq_counter = 0


class Tensor:
    """A dense real array plus the bookkeeping for reverse-mode autodiff.

    `grad` is populated only on leaf tensors (those created directly rather
    than by an op) that have `requires_grad=True`; repeated backward calls
    accumulate into it until it is reset to None. Creation order doubles as
    a topological order of the op graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        global _seq_counter
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        _seq_counter += 1
        self._seq = _seq_counter
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values out of op '{_op}'")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _result(data, parents, bwd, op):
    """Wrap an op output; prune the backward closure when no parent needs grad."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=bwd, _op=op)
    return out


def _check_same_dtype(op, *ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may broadcast over a's leading dims (suffix match)."""
    _check_same_dtype("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and not (len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb):
        raise ShapeError(f"add: shapes {sa} and {sb} are not leading-broadcastable")
    out = a.data + b.data

    def bwd(g, adj):
        adj(a, g)
        if sa == sb:
            adj(b, g)
        else:
            axes = tuple(range(len(sa) - len(sb)))
            adj(b, g.sum(axis=axes))

    return _result(out, (a, b), bwd, "add")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    s = float(s)
    out = a.data * s

    def bwd(g, adj):
        adj(a, g * s)

    return _result(out, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: 2-D x 2-D, batched with identical leading dims, or
    N-D x 2-D (the 2-D operand applied to every leading slice).
    """
    _check_same_dtype("matmul", a, b)
    sa, sb = a.data.shape, b.data.shape
    nd2d = len(sa) > 2 and len(sb) == 2
    if (len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]
            or (not nd2d and (len(sa) != len(sb) or sa[:-2] != sb[:-2]))):
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    out = a.data @ b.data

    def bwd(g, adj):
        adj(a, g @ np.swapaxes(b.data, -1, -2))
        if nd2d:
            adj(b, a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1]))
        else:
            adj(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b; x may be [n, k] or [batch, n, k]."""
    _check_same_dtype("linear", x, w, b)
    sx, sw = x.data.shape, w.data.shape
    if len(sx) not in (2, 3) or len(sw) != 2 or sx[-1] != sw[0] or b.data.shape != (sw[1],):
        raise ShapeError(f"linear: incompatible shapes {sx}, {sw}, {b.data.shape}")
    x2 = x.data.reshape(-1, sw[0])
    out = x2 @ w.data
    out += b.data
    out = out.reshape(sx[:-1] + (sw[1],))

    def bwd(g, adj):
        g2 = g.reshape(-1, sw[1])
        adj(x, (g2 @ w.data.T).reshape(sx))
        adj(w, x2.T @ g2)
        adj(b, g2.sum(axis=0))

    return _result(out, (x, w, b), bwd, "linear")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bwd(g, adj):
        adj(a, np.transpose(g, inv))

    return _result(out, (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g, adj):
        adj(a, g.reshape(orig))

    return _result(out, (a,), bwd, "reshape")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0. Duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bwd(g, adj):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        adj(a, ga)

    return _result(out, (a,), bwd, "gather_rows")


def scatter_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of `a` at positions `idx` in a zero array of n_rows rows.

    Indices must be unique: this is placement, not accumulation.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("scatter_rows: duplicate indices")
    if a.data.shape[0] != len(idx):
        raise ShapeError(f"scatter_rows: {a.data.shape[0]} rows vs {len(idx)} indices")
    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data

    def bwd(g, adj):
        adj(a, g[idx])

    return _result(out, (a,), bwd, "scatter_rows")


def concat_rows(parts) -> Tensor:
    """Concatenate along axis 0."""
    parts = list(parts)
    _check_same_dtype("concat_rows", *parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g, adj):
        off = 0
        for p, n in zip(parts, sizes):
            adj(p, g[off:off + n])
            off += n

    return _result(out, tuple(parts), bwd, "concat_rows")


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [d] or [1, d] tensor into [n, d]."""
    row = a.data.reshape(1, -1)
    out = np.repeat(row, n, axis=0)

    def bwd(g, adj):
        adj(a, g.sum(axis=0).reshape(a.data.shape))

    return _result(out, (a,), bwd, "tile_rows")


# Token-axis (axis 1) variants over [batch, n, d] stacks. The batched
# pretraining path relies on exact masking producing equal per-sample
# counts, so ragged shapes never arise.


def gather_tokens(x: Tensor, idx) -> Tensor:
    """Select per-sample token rows: x [b, n, d], idx [b, k] -> [b, k, d]."""
    idx = np.asarray(idx, dtype=np.int64)
    b, n, d = x.data.shape
    if idx.ndim != 2 or idx.shape[0] != b:
        raise ShapeError(f"gather_tokens: idx shape {idx.shape} vs batch {b}")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    bidx = np.arange(b)[:, None]

    def bwd(g, adj):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (bidx, idx), g)
        adj(x, gx)

    return _result(out, (x,), bwd, "gather_tokens")


def scatter_tokens(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place per-sample token rows at idx in zero stacks of n_rows tokens.

    idx values must be unique within each sample (placement semantics).
    """
    idx = np.asarray(idx, dtype=np.int64)
    b, k, d = x.data.shape
    if idx.shape != (b, k):
        raise ShapeError(f"scatter_tokens: idx shape {idx.shape} vs x {x.data.shape}")
    out = np.zeros((b, n_rows, d), dtype=x.data.dtype)
    np.put_along_axis(out, idx[:, :, None], x.data, axis=1)

    def bwd(g, adj):
        adj(x, np.take_along_axis(g, idx[:, :, None], axis=1))

    return _result(out, (x,), bwd, "scatter_tokens")


def slice_tokens(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous token-range view x[:, lo:hi, :] as a copy."""
    out = x.data[:, lo:hi].copy()

    def bwd(g, adj):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        adj(x, gx)

    return _result(out, (x,), bwd, "slice_tokens")


def concat_tokens(parts) -> Tensor:
    """Concatenate [b, n_i, d] stacks along the token axis."""
    parts = list(parts)
    _check_same_dtype("concat_tokens", *parts)
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(g, adj):
        off = 0
        for p, n in zip(parts, sizes):
            adj(p, g[:, off:off + n])
            off += n

    return _result(out, tuple(parts), bwd, "concat_tokens")


def fill_tokens(vec: Tensor, batch: int, k: int) -> Tensor:
    """Broadcast a [d] vector into a [batch, k, d] stack."""
    d = vec.data.reshape(-1).shape[0]
    out = np.broadcast_to(vec.data.reshape(1, 1, d), (batch, k, d)).copy()

    def bwd(g, adj):
        adj(vec, g.sum(axis=(0, 1)).reshape(vec.data.shape))

    return _result(out, (vec,), bwd, "fill_tokens")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layer_norm", x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g, adj):
        lead = tuple(range(g.ndim - 1))
        adj(gamma, (g * xhat).sum(axis=lead))
        adj(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        # d/dx of (x - mu) * inv with mu, var functions of x
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        adj(x, inv * (dxhat - m1 - xhat * m2))

    return _result(out, (x, gamma, beta), bwd, "layer_norm")


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype)

    def bwd(g, adj):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        adj(x, g * (cdf + x.data * pdf).astype(x.data.dtype))

    return _result(out, (x,), bwd, "gelu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically shifted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, adj):
        dot = (g * out).sum(axis=-1, keepdims=True)
        adj(x, (g - dot) * out)

    return _result(out, (x,), bwd, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Dropout-free scaled dot-product attention: softmax(q kT / sqrt(d)) v.

    Shapes: [..., n, d] with identical leading dims on q, k, v. Fused
    forward/backward to keep the op count down in the training loop.
    """
    _check_same_dtype("attention", q, k, v)
    if q.data.shape[:-2] != k.data.shape[:-2] or k.data.shape != v.data.shape or q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention: shapes {q.data.shape}, {k.data.shape}, {v.data.shape}")
    d = q.data.shape[-1]
    s = float(1.0 / np.sqrt(d))
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)
    out = a @ v.data

    def bwd(g, adj):
        adj(v, np.swapaxes(a, -1, -2) @ g)
        da = g @ np.swapaxes(v.data, -1, -2)
        ds = (da - (da * a).sum(axis=-1, keepdims=True)) * a * s
        adj(q, ds @ k.data)
        adj(k, np.swapaxes(ds, -1, -2) @ q.data)

    return _result(out, (q, k, v), bwd, "attention")


def mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    n = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g, adj):
        if axis is None:
            adj(x, np.full_like(x.data, g / n))
        else:
            adj(x, np.repeat(np.expand_dims(g / n, axis), x.data.shape[axis], axis=axis))

    return _result(out, (x,), bwd, "mean")


def tsum(x: Tensor) -> Tensor:
    """Sum over all elements to a scalar."""
    out = x.data.sum()

    def bwd(g, adj):
        adj(x, np.full_like(x.data, g))

    return _result(out, (x,), bwd, "sum")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_same_dtype("mse", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape}")
    diff = a.data - b.data
    out = (diff * diff).mean()
    n = diff.size

    def bwd(g, adj):
        c = (2.0 * g / n) * diff
        adj(a, c)
        adj(b, -c)

    return _result(out, (a, b), bwd, "mse")


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against [n, c] logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs labels {labels.shape}")
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    out = (lse - z[np.arange(n), labels]).mean()

    def bwd(g, adj):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        adj(logits, (g / n) * p)

    return _result(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# backward


def topo_order(root: Tensor):
    """Topological order of the op graph reachable from `root`.

    Collects reachable nodes iteratively (no recursion limit) and sorts by
    creation sequence, which is a valid topological order because every
    op's parents exist before its output. Each node appears exactly once.
    """
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the .grad of every requires_grad leaf.

    `loss` must be scalar. Repeated calls without resetting .grad add up.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    adjoint = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}

    def adj(t, g):
        key = id(t)
        if key in adjoint:
            adjoint[key] = adjoint[key] + g
        else:
            adjoint[key] = g

    for node in reversed(topo_order(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, adj)
        elif node.requires_grad:
            g = np.asarray(g, dtype=node.data.dtype)
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of one analytic-vs-central-difference comparison."""

    def __init__(self, max_rel_error, worst_param, worst_index, n_checked, tolerance):
        self.max_rel_error = max_rel_error
        self.worst_param = worst_param
        self.worst_index = worst_index
        self.n_checked = n_checked
        self.tolerance = tolerance

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({verdict}: max_rel_error={self.max_rel_error:.3e} "
                f"at {self.worst_param}[{self.worst_index}], n={self.n_checked}, tol={self.tolerance:g})")


def gradient_check(f, points, tolerance=1e-6, step=1e-5, max_coords=None, rng=None):
    """Compare the analytic gradient of scalar f(points) to central differences.

    `points` is a dict name -> leaf Tensor (float64 recommended). For every
    checked coordinate the relative error is |a - n| / max(|a|, |n|, 1e-8).
    `max_coords` caps the number of coordinates checked per tensor (sampled
    with `rng`); None checks all of them.
    """
    points = dict(points)
    for t in points.values():
        t.grad = None
    loss = f(points)
    backward(loss)

    worst = (0.0, None, None)
    n_checked = 0
    for name, t in points.items():
        flat = t.data.reshape(-1)
        g = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(points).data)
            flat[i] = orig - step
            fm = float(f(points).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            analytic = float(g[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            n_checked += 1
            if rel > worst[0]:
                worst = (rel, name, int(i))
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, tolerance)
