"""Dense tensors with reverse-mode differentiation.

A deliberately small engine on top of NumPy: float32 by default (float64
for gradient-check mode), a closed primitive set, and a tape built from
parent links. All leading axes are free; reductions and normalization
act on trailing axes, which is what lets the model code run unbatched
(N, D) slot sets and batched (B, N, D) ones through the same functions.

Broadcasting is restricted to explicit cases: suffix-shaped bias
addition, python scalars, a size-1 last axis for mul/div, and the
explicit ``broadcast_to`` op. Everything else must shape-match exactly
and raises ConfigurationError naming the op.

Determinism notes: ``sum``/``mean`` and the softmax denominator always
accumulate in float64, and ``matmul(acc64=True)`` computes the product
in float64 before rounding back. Attention code uses these on every
reduction whose operand order changes under a slot permutation, making
permutation equivariance hold bitwise rather than approximately.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Dict, Iterable, Sequence

import numpy as np

from statm import _kernels as K
from statm.errors import ConfigurationError, ContractViolation

_node_counter = 0
_grad_enabled = True


def _next_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d array node in the differentiation graph.

    ``parents``/``_bwd`` are populated only for op results while grad
    recording is on. ``grad`` is filled on trainable leaves by
    ``backward``. Leaves survive backward; interior nodes are released.
    """

    __slots__ = ("data", "node_id", "requires_grad", "op", "parents", "_bwd", "grad")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf",
                 parents=(), bwd=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.node_id = _next_id()
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._bwd = bwd
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; the module-level functions are the primitive set
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_tensor(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(op: str, *ts: Tensor):
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ConfigurationError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          bwd: Callable[[np.ndarray], Sequence] | None) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, bwd=bwd)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; b may be a scalar or a suffix-shaped bias."""
    if not isinstance(b, Tensor):
        if np.isscalar(b):
            val = a.data + a.dtype.type(b)
            return _make("add", val, (a,), lambda g: [g])
        b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: [g, g])
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        dt = a.dtype

        def bwd(g, nd=b.ndim):
            gb = g.sum(axis=tuple(range(g.ndim - nd)), dtype=np.float64).astype(dt)
            return [g, gb]

        return _make("add", a.data + b.data, (a, b), bwd)
    raise ConfigurationError(f"add: shapes {a.shape} and {b.shape} do not conform")


def _ew_broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return "suffix"
    if (b.ndim == a.ndim and b.shape[-1] == 1 and a.shape[:-1] == b.shape[:-1]):
        return "last1"
    raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_like(g: np.ndarray, kind: str, b: Tensor) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "suffix":
        return g.sum(axis=tuple(range(g.ndim - b.ndim)), dtype=np.float64).astype(b.dtype)
    return g.sum(axis=-1, keepdims=True, dtype=np.float64).astype(b.dtype)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a scalar, suffix-shaped, or size-1 last axis."""
    if not isinstance(b, Tensor):
        c = a.dtype.type(b)
        return _make("mul", a.data * c, (a,), lambda g: [g * c])
    _check_same_dtype("mul", a, b)
    kind = _ew_broadcast_kind("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return [ (g * bd).astype(a.dtype), _reduce_like(g * ad, kind, b) ]

    return _make("mul", ad * bd, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    """Elementwise quotient; same broadcast forms as mul."""
    if not isinstance(b, Tensor):
        c = a.dtype.type(b)
        return _make("div", a.data / c, (a,), lambda g: [g / c])
    _check_same_dtype("div", a, b)
    kind = _ew_broadcast_kind("div", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = (g / bd).astype(a.dtype)
        gb = _reduce_like(-g * ad / (bd * bd), kind, b)
        return [ga, gb]

    return _make("div", ad / bd, (a, b), bwd)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a scalar floor; gradient passes where a >= floor."""
    c = a.dtype.type(floor)
    mask = a.data >= c

    def bwd(g):
        return [np.where(mask, g, 0).astype(a.dtype)]

    return _make("maximum", np.maximum(a.data, c), (a,), bwd)


def matmul(a: Tensor, b: Tensor, acc64: bool = False) -> Tensor:
    """Matrix product over the last two axes.

    Accepted forms: (..., m, k) @ (k, n), or (..., m, k) @ (..., k, n)
    with identical leading axes. ``acc64`` computes the forward product
    in float64 and rounds back (used where the reduction order follows
    the slot order).
    """
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError(f"matmul: need ndim>=2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ConfigurationError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if acc64 and ad.dtype == np.float32:
        out = (ad.astype(np.float64) @ bd.astype(np.float64)).astype(np.float32)
    else:
        out = ad @ bd

    if b.ndim == 2:
        def bwd(g):
            ga = g @ bd.T
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return [ga, gb]
    else:
        def bwd(g):
            return [g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g]

    return _make("matmul", out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ConfigurationError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: [np.ascontiguousarray(g.transpose(inv))])


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ConfigurationError(f"reshape: {a.shape} -> {shape}: {e}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: [g.reshape(src)])


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ConfigurationError(f"broadcast_to: {a.shape} -> {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)
    expanded = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def bwd(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)), dtype=np.float64)
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True,
                      dtype=np.float64)
        return [g.astype(a.dtype).reshape(src)]

    return _make("broadcast_to", np.ascontiguousarray(out), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigurationError("concat: empty input list")
    _check_same_dtype("concat", *tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ConfigurationError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, splits, axis=axis)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bwd)


def slice_tensor(a: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints); gradient scatters back."""
    out = a.data[key]
    src_shape = a.shape
    dt = a.dtype

    def bwd(g):
        full = np.zeros(src_shape, dtype=dt)
        full[key] = g
        return [full]

    return _make("slice", np.ascontiguousarray(out), (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shp = a.shape

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, shp).astype(a.dtype)]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, shp).astype(a.dtype)]

    return _make("sum", out, (a,), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def relu(a: Tensor) -> Tensor:
    y = K.relu_fwd(a.data)
    return _make("relu", y, (a,), lambda g: [K.relu_bwd(y, g)])


def sigmoid(a: Tensor) -> Tensor:
    y = K.sigmoid_fwd(a.data)
    return _make("sigmoid", y, (a,), lambda g: [K.sigmoid_bwd(y, g)])


def tanh(a: Tensor) -> Tensor:
    y = K.tanh_fwd(a.data)
    return _make("tanh", y, (a,), lambda g: [K.tanh_bwd(y, g)])


def softplus(a: Tensor) -> Tensor:
    y = K.softplus_fwd(a.data)
    ad = a.data
    return _make("softplus", y, (a,), lambda g: [K.softplus_bwd(ad, g)])


def _to_last_axis_2d(x: np.ndarray, axis: int):
    """Move `axis` last and flatten to (rows, n); returns array + undo info."""
    axis = axis % x.ndim
    moved = axis != x.ndim - 1
    if moved:
        x = np.moveaxis(x, axis, -1)
    shp = x.shape
    return np.ascontiguousarray(x).reshape(-1, shp[-1]), shp, moved, axis


def _from_last_axis_2d(y2: np.ndarray, shp, moved: bool, axis: int):
    y = y2.reshape(shp)
    if moved:
        y = np.moveaxis(y, -1, axis)
    return np.ascontiguousarray(y)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted, float64 denominator)."""
    x2, shp, moved, ax = _to_last_axis_2d(a.data, axis)
    y2 = K.softmax_fwd(x2)
    y = _from_last_axis_2d(y2, shp, moved, ax)

    def bwd(g):
        g2, _, _, _ = _to_last_axis_2d(g, ax)
        gx2 = K.softmax_bwd(y2, g2)
        return [_from_last_axis_2d(gx2, shp, moved, ax)]

    return _make("softmax", y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ConfigurationError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last axis {n}")
    _check_same_dtype("layer_norm", a, gain, bias)
    x2 = np.ascontiguousarray(a.data).reshape(-1, n)
    y2, mu, rstd = K.layer_norm_fwd(x2, gain.data, bias.data, eps)
    shp = a.shape
    gd = gain.data

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        gx2, ggain, gbias = K.layer_norm_bwd(x2, gd, mu, rstd, g2)
        return [gx2.reshape(shp), ggain, gbias]

    return _make("layer_norm", y2.reshape(shp), (a, gain, bias), bwd)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup; gradient scatter-adds into the table."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ConfigurationError(f"embedding: indices dtype {idx.dtype} is not integer")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ConfigurationError(
            f"embedding: index out of range for table with {table.shape[0]} rows")
    tshape = table.shape
    dt = table.dtype

    def bwd(g):
        gt = np.zeros(tshape, dtype=dt)
        np.add.at(gt, idx, g)
        return [gt]

    return _make("embedding", table.data[idx], (table,), bwd)


_FORWARD_OPS = {
    "add": add, "mul": mul, "div": div, "maximum": maximum, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "broadcast_to": broadcast_to,
    "concat": concat, "slice": slice_tensor, "sum": sum_, "mean": mean_,
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus,
    "softmax": softmax, "layer_norm": layer_norm, "embedding": embedding,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (the uniform entry point used in tests)."""
    if kind not in _FORWARD_OPS:
        raise ConfigurationError(f"forward_op: unknown kind '{kind}'")
    return _FORWARD_OPS[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Returns a gradient map {node_id: Tensor} covering every trainable
    leaf reachable from the loss; those leaves also get ``.grad`` set.
    Interior nodes are released afterwards (the graph is consumed).
    """
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(topo):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._bwd is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._bwd(g)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg

    out: Dict[int, Tensor] = {}
    for node in topo:
        if node._bwd is None and node.grad is not None:
            out[node.node_id] = Tensor(node.grad)
        else:
            # consume the graph: interior nodes cannot be backpropped again
            node.parents = ()
            node._bwd = None
    return out


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(fn, inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    ``fn(inputs) -> scalar Tensor`` must be deterministic. The error for
    each input coordinate is |analytic - fd| / max(1, |analytic|); the
    max over all coordinates of all trainable inputs is returned.
    """
    if not (0 < eps <= 1e-1):
        raise ConfigurationError(f"finite_difference_check: eps {eps} out of (0, 1e-1]")
    inputs = list(inputs)
    zero_grads(inputs)
    out = fn(inputs)
    if not np.all(np.isfinite(out.data)):
        raise ContractViolation("finite_difference_check: non-finite forward value")
    gm = backward(out)

    def f() -> float:
        with no_grad():
            v = fn(inputs)
        return float(v.data.reshape(-1)[0])

    max_err = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = gm.get(t.node_id)
        ga = analytic.data if analytic is not None else np.zeros(t.shape, dtype=t.dtype)
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f1 = f()
            flat[i] = orig - eps
            f2 = f()
            flat[i] = orig
            if not (math.isfinite(f1) and math.isfinite(f2)):
                raise ContractViolation(
                    f"finite_difference_check: non-finite value at coordinate {i}")
            fd = (f1 - f2) / (2.0 * eps)
            err = abs(float(gflat[i]) - fd) / max(1.0, abs(float(gflat[i])))
            if err > max_err:
                max_err = err
    return max_err
