"""Minimal dense tensor graph with reverse-mode automatic differentiation.

Values are plain float64 numpy arrays. A computation is a DAG of `Node`
objects built with the constructor functions below (`matmul`, `outer`,
`sigmoid`, ...); leaves are created with `leaf(name, shape)` and bound to
concrete arrays at evaluation time. Shapes are fixed and checked at graph
construction; there is no broadcasting beyond the few explicit row/column
variants provided as their own primitives.

Every produced value is checked for NaN/Inf and a `NonFiniteError` is
raised immediately; silent propagation would mask recurrence divergence
downstream.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "UnboundLeafError",
    "leaf",
    "const",
    "add",
    "sub",
    "mul",
    "smul",
    "scale",
    "add_rowvec",
    "add_scalar",
    "mul_cols",
    "matmul",
    "outer",
    "transpose",
    "sigmoid",
    "exp",
    "log",
    "rsqrt",
    "sum_all",
    "row_softmax",
    "log_row_softmax",
    "rms_norm",
    "row",
    "elem",
    "take_rows",
    "take_at",
    "stack_rows",
    "concat_cols",
    "topo_order",
    "evaluate",
    "evaluate_many",
    "gradient",
    "finite_difference_check",
]


class NumericsError(Exception):
    """Base class for graph construction/evaluation failures."""


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class UnboundLeafError(NumericsError):
    pass


class Node:
    """One operation (or leaf/constant) in the computation DAG.

    Immutable after construction. `shape` is inferred eagerly so that
    incompatible graphs fail at build time, not at evaluation.
    """

    __slots__ = ("op", "inputs", "attrs", "shape", "name")

    def __init__(self, op, inputs=(), attrs=None, shape=(), name=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.shape = tuple(shape)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label} shape={self.shape}>"


def _as_array(value):
    a = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite value supplied to graph")
    return a


def leaf(name, shape):
    """Unbound input/parameter placeholder; bound via the bindings map."""
    return Node("leaf", shape=tuple(shape), name=name)


def const(value):
    a = _as_array(value)
    return Node("const", attrs={"value": a}, shape=a.shape)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return Node("add", (a, b), shape=a.shape)


def sub(a, b):
    _same_shape(a, b, "sub")
    return Node("sub", (a, b), shape=a.shape)


def mul(a, b):
    _same_shape(a, b, "mul")
    return Node("mul", (a, b), shape=a.shape)


def smul(s, x):
    """Scalar tensor (shape ()) times arbitrary tensor."""
    if s.shape != ():
        raise ShapeError(f"smul: scalar operand has shape {s.shape}")
    return Node("smul", (s, x), shape=x.shape)


def scale(x, c):
    """Multiply by a python float constant."""
    return Node("scale", (x,), attrs={"c": float(c)}, shape=x.shape)


def add_rowvec(x, b):
    """(m, n) + (n,) added to every row."""
    if len(x.shape) != 2 or len(b.shape) != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} + {b.shape}")
    return Node("add_rowvec", (x, b), shape=x.shape)


def add_scalar(x, s):
    """Tensor plus scalar tensor (shape ())."""
    if s.shape != ():
        raise ShapeError(f"add_scalar: scalar operand has shape {s.shape}")
    return Node("add_scalar", (x, s), shape=x.shape)


def mul_cols(x, a):
    """Scale column j of (m, n) matrix by a[j]; equals X @ Diag(a)."""
    if len(x.shape) != 2 or len(a.shape) != 1 or x.shape[1] != a.shape[0]:
        raise ShapeError(f"mul_cols: {x.shape} * {a.shape}")
    return Node("mul_cols", (x, a), shape=x.shape)


def matmul(a, b):
    """(m,n)@(n,p), (m,n)@(n,) -> (m,), or (n,)@(n,p) -> (p,)."""
    if len(a.shape) == 2 and len(b.shape) == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        shape = (a.shape[0], b.shape[1])
    elif len(a.shape) == 2 and len(b.shape) == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        shape = (a.shape[0],)
    elif len(a.shape) == 1 and len(b.shape) == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        shape = (b.shape[1],)
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), shape=shape)


def outer(u, v):
    if len(u.shape) != 1 or len(v.shape) != 1:
        raise ShapeError(f"outer: need vectors, got {u.shape}, {v.shape}")
    return Node("outer", (u, v), shape=(u.shape[0], v.shape[0]))


def transpose(x):
    if len(x.shape) != 2:
        raise ShapeError(f"transpose: need matrix, got {x.shape}")
    return Node("transpose", (x,), shape=(x.shape[1], x.shape[0]))


def sigmoid(x):
    return Node("sigmoid", (x,), shape=x.shape)


def exp(x):
    return Node("exp", (x,), shape=x.shape)


def log(x):
    return Node("log", (x,), shape=x.shape)


def rsqrt(x):
    return Node("rsqrt", (x,), shape=x.shape)


def sum_all(x):
    return Node("sum_all", (x,), shape=())


def row_softmax(x, mask=None):
    """Row-wise softmax of a matrix; optional boolean visibility mask.

    Masked-out (False) entries get probability exactly zero and each row
    renormalizes over its visible entries.
    """
    if len(x.shape) != 2:
        raise ShapeError(f"row_softmax: need matrix, got {x.shape}")
    attrs = {}
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"row_softmax: mask shape {mask.shape} vs {x.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("row_softmax: a row has no visible entries")
        attrs["mask"] = mask
    return Node("row_softmax", (x,), attrs=attrs, shape=x.shape)


def log_row_softmax(x):
    """Numerically stable row-wise log-softmax (x - logsumexp per row)."""
    if len(x.shape) != 2:
        raise ShapeError(f"log_row_softmax: need matrix, got {x.shape}")
    return Node("log_row_softmax", (x,), shape=x.shape)


def rms_norm(x, gain, eps=1e-8):
    """Row-wise RMS normalization of (m, n) with per-column gain (n,)."""
    if len(x.shape) != 2 or len(gain.shape) != 1 or x.shape[1] != gain.shape[0]:
        raise ShapeError(f"rms_norm: {x.shape} with gain {gain.shape}")
    return Node("rms_norm", (x, gain), attrs={"eps": float(eps)}, shape=x.shape)


def row(x, i):
    if len(x.shape) != 2:
        raise ShapeError(f"row: need matrix, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"row: index {i} out of range for {x.shape}")
    return Node("row", (x,), attrs={"i": int(i)}, shape=(x.shape[1],))


def elem(x, i):
    if len(x.shape) != 1:
        raise ShapeError(f"elem: need vector, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"elem: index {i} out of range for {x.shape}")
    return Node("elem", (x,), attrs={"i": int(i)}, shape=())


def take_rows(x, idx):
    """Gather rows of a matrix by a constant integer index vector."""
    if len(x.shape) != 2:
        raise ShapeError(f"take_rows: need matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("take_rows: index out of range")
    return Node("take_rows", (x,), attrs={"idx": idx}, shape=(idx.size, x.shape[1]))


def take_at(x, rows, cols):
    """Gather x[rows[i], cols[i]] into a vector; indices are constants."""
    if len(x.shape) != 2:
        raise ShapeError(f"take_at: need matrix, got {x.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("take_at: rows/cols must be matching 1-D index vectors")
    if rows.size and (
        rows.min() < 0 or rows.max() >= x.shape[0] or cols.min() < 0 or cols.max() >= x.shape[1]
    ):
        raise ShapeError("take_at: index out of range")
    return Node("take_at", (x,), attrs={"rows": rows, "cols": cols}, shape=(rows.size,))


def stack_rows(vectors):
    vectors = tuple(vectors)
    if not vectors:
        raise ShapeError("stack_rows: empty input")
    n = vectors[0].shape
    if len(n) != 1 or any(v.shape != n for v in vectors):
        raise ShapeError("stack_rows: all inputs must be equal-length vectors")
    return Node("stack_rows", vectors, shape=(len(vectors), n[0]))


def concat_cols(mats):
    mats = tuple(mats)
    if not mats:
        raise ShapeError("concat_cols: empty input")
    m = mats[0].shape[0]
    if any(len(x.shape) != 2 or x.shape[0] != m for x in mats):
        raise ShapeError("concat_cols: all inputs must be matrices with equal rows")
    return Node("concat_cols", mats, shape=(m, sum(x.shape[1] for x in mats)))


# ---------------------------------------------------------------------------
# forward kernels


def _fwd_row_softmax(vals, attrs):
    (x,) = vals
    mask = attrs.get("mask")
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _fwd_log_row_softmax(vals, attrs):
    (x,) = vals
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _fwd_rms_norm(vals, attrs):
    x, g = vals
    r = np.sqrt((x * x).mean(axis=1, keepdims=True) + attrs["eps"])
    return (x / r) * g


_FORWARD = {
    "const": lambda vals, attrs: attrs["value"],
    "add": lambda vals, attrs: vals[0] + vals[1],
    "sub": lambda vals, attrs: vals[0] - vals[1],
    "mul": lambda vals, attrs: vals[0] * vals[1],
    "smul": lambda vals, attrs: vals[0] * vals[1],
    "scale": lambda vals, attrs: vals[0] * attrs["c"],
    "add_rowvec": lambda vals, attrs: vals[0] + vals[1][None, :],
    "add_scalar": lambda vals, attrs: vals[0] + vals[1],
    "mul_cols": lambda vals, attrs: vals[0] * vals[1][None, :],
    "matmul": lambda vals, attrs: vals[0] @ vals[1],
    "outer": lambda vals, attrs: np.outer(vals[0], vals[1]),
    "transpose": lambda vals, attrs: vals[0].T.copy(),
    "sigmoid": lambda vals, attrs: 1.0 / (1.0 + np.exp(-vals[0])),
    "exp": lambda vals, attrs: np.exp(vals[0]),
    "log": lambda vals, attrs: np.log(vals[0]),
    "rsqrt": lambda vals, attrs: 1.0 / np.sqrt(vals[0]),
    "sum_all": lambda vals, attrs: np.asarray(vals[0].sum()),
    "row_softmax": _fwd_row_softmax,
    "log_row_softmax": _fwd_log_row_softmax,
    "rms_norm": _fwd_rms_norm,
    "row": lambda vals, attrs: vals[0][attrs["i"]].copy(),
    "elem": lambda vals, attrs: np.asarray(vals[0][attrs["i"]]),
    "take_rows": lambda vals, attrs: vals[0][attrs["idx"]],
    "take_at": lambda vals, attrs: vals[0][attrs["rows"], attrs["cols"]],
    "stack_rows": lambda vals, attrs: np.stack(vals, axis=0),
    "concat_cols": lambda vals, attrs: np.concatenate(vals, axis=1),
}


# ---------------------------------------------------------------------------
# reverse-mode local derivatives: op -> fn(g, input_vals, out_val, attrs)
# returning one cotangent per input


def _vjp_matmul(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return b @ g, np.outer(a, g)  # (n,) @ (n,p)


def _vjp_row_softmax(g, vals, out, attrs):
    dot = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - dot),)


def _vjp_log_row_softmax(g, vals, out, attrs):
    p = np.exp(out)
    return (g - p * g.sum(axis=1, keepdims=True),)


def _vjp_rms_norm(g, vals, out, attrs):
    x, gain = vals
    n = x.shape[1]
    r = np.sqrt((x * x).mean(axis=1, keepdims=True) + attrs["eps"])
    xh = x / r
    u = g * gain
    dx = (u - xh * (u * xh).mean(axis=1, keepdims=True)) / r
    return dx, (g * xh).sum(axis=0)


def _vjp_take_rows(g, vals, out, attrs):
    dx = np.zeros_like(vals[0])
    np.add.at(dx, attrs["idx"], g)
    return (dx,)


def _vjp_take_at(g, vals, out, attrs):
    dx = np.zeros_like(vals[0])
    np.add.at(dx, (attrs["rows"], attrs["cols"]), g)
    return (dx,)


def _vjp_row(g, vals, out, attrs):
    dx = np.zeros_like(vals[0])
    dx[attrs["i"]] = g
    return (dx,)


def _vjp_elem(g, vals, out, attrs):
    dx = np.zeros_like(vals[0])
    dx[attrs["i"]] = g
    return (dx,)


def _vjp_concat_cols(g, vals, out, attrs):
    grads, c = [], 0
    for v in vals:
        grads.append(g[:, c : c + v.shape[1]])
        c += v.shape[1]
    return tuple(grads)


_VJP = {
    "add": lambda g, vals, out, attrs: (g, g),
    "sub": lambda g, vals, out, attrs: (g, -g),
    "mul": lambda g, vals, out, attrs: (g * vals[1], g * vals[0]),
    "smul": lambda g, vals, out, attrs: (np.asarray((g * vals[1]).sum()), g * vals[0]),
    "scale": lambda g, vals, out, attrs: (g * attrs["c"],),
    "add_rowvec": lambda g, vals, out, attrs: (g, g.sum(axis=0)),
    "add_scalar": lambda g, vals, out, attrs: (g, np.asarray(g.sum())),
    "mul_cols": lambda g, vals, out, attrs: (g * vals[1][None, :], (g * vals[0]).sum(axis=0)),
    "matmul": _vjp_matmul,
    "outer": lambda g, vals, out, attrs: (g @ vals[1], g.T @ vals[0]),
    "transpose": lambda g, vals, out, attrs: (g.T.copy(),),
    "sigmoid": lambda g, vals, out, attrs: (g * out * (1.0 - out),),
    "exp": lambda g, vals, out, attrs: (g * out,),
    "log": lambda g, vals, out, attrs: (g / vals[0],),
    "rsqrt": lambda g, vals, out, attrs: (g * (-0.5) * out**3,),
    "sum_all": lambda g, vals, out, attrs: (np.full_like(vals[0], float(g)),),
    "row_softmax": _vjp_row_softmax,
    "log_row_softmax": _vjp_log_row_softmax,
    "rms_norm": _vjp_rms_norm,
    "row": _vjp_row,
    "elem": _vjp_elem,
    "take_rows": _vjp_take_rows,
    "take_at": _vjp_take_at,
    "stack_rows": lambda g, vals, out, attrs: tuple(g[i] for i in range(len(vals))),
    "concat_cols": _vjp_concat_cols,
}


def register_op(name, forward, vjp):
    """Install a fused operation with a hand-written forward and vjp.

    `forward(vals, attrs)` returns the output array; `vjp(g, vals, out, attrs)`
    returns one cotangent per input. Used by the mixer scans, whose per-step
    graphs would otherwise dominate graph-construction time.
    """
    if name in _FORWARD:
        raise NumericsError(f"op {name!r} already registered")
    _FORWARD[name] = forward
    _VJP[name] = vjp


def fused(name, inputs, shape, attrs=None):
    """Node for a registered fused operation."""
    if name not in _FORWARD:
        raise NumericsError(f"unknown fused op {name!r}")
    return Node(name, tuple(inputs), attrs=attrs or {}, shape=tuple(shape))


# ---------------------------------------------------------------------------
# evaluation


def topo_order(roots):
    """Post-order (inputs before consumers) over the union of root DAGs."""
    order = []
    seen = set()
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def _bind(node, bindings):
    if bindings is not None and node in bindings:
        v = np.asarray(bindings[node], dtype=np.float64)
    elif node.op == "const":
        return node.attrs["value"]
    else:
        raise UnboundLeafError(f"unbound leaf {node.name!r}")
    if v.shape != node.shape:
        raise ShapeError(f"leaf {node.name!r}: bound shape {v.shape} != {node.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"leaf {node.name!r}: non-finite binding")
    return v


def _forward(order, bindings):
    values = {}
    # Overflow and friends surface as NonFiniteError below, not as warnings.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for node in order:
            if node.op in ("leaf", "const"):
                values[id(node)] = _bind(node, bindings)
                continue
            out = _FORWARD[node.op]([values[id(i)] for i in node.inputs], node.attrs)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite result in op {node.op!r}")
            values[id(node)] = out
    return values


def evaluate(root, bindings=None):
    """Evaluate a graph to its root value. Pure: bindings are not mutated."""
    return evaluate_many([root], bindings)[0]


def evaluate_many(roots, bindings=None):
    order = topo_order(roots)
    values = _forward(order, bindings)
    return [values[id(r)] for r in roots]


def gradient(root, bindings, wrt, return_value=False):
    """Reverse-mode gradients of a scalar root w.r.t. the given leaves.

    Returns {leaf: array}; leaves not reached by the backward sweep get
    explicit zeros. With `return_value`, returns (grads, root value) so the
    forward pass is not repeated.
    """
    if root.shape != ():
        raise ShapeError(f"gradient: root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    order = topo_order([root])
    values = _forward(order, bindings)
    grads = {id(root): np.asarray(1.0)}
    owned = set()  # buffers this sweep allocated and may mutate in place

    def accumulate(inp, dg):
        key = id(inp)
        prev = grads.get(key)
        if prev is None:
            grads[key] = dg
        elif key in owned:
            prev += dg
        else:
            # np.asarray: a 0-d np.float64 is immutable and += would rebind,
            # silently dropping later contributions; force a writable buffer.
            grads[key] = np.asarray(prev + dg)
            owned.add(key)

    def scatter_buffer(inp):
        key = id(inp)
        buf = grads.get(key)
        if buf is None or key not in owned:
            fresh = np.zeros(inp.shape)
            if buf is not None:
                fresh += buf
            grads[key] = buf = fresh
            owned.add(key)
        return buf

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node.op in ("leaf", "const"):
            if g is not None and node.op == "leaf":
                grads[id(node)] = g  # keep leaf grads for collection
            continue
        owned.discard(id(node))
        op = node.op
        # Indexing ops scatter straight into a shared parent buffer; the
        # generic path would allocate a full-size gradient per slice.
        if op in ("row", "elem"):
            inp = node.inputs[0]
            if inp.op != "const":
                scatter_buffer(inp)[node.attrs["i"]] += g
            continue
        if op == "take_rows":
            inp = node.inputs[0]
            if inp.op != "const":
                np.add.at(scatter_buffer(inp), node.attrs["idx"], g)
            continue
        if op == "take_at":
            inp = node.inputs[0]
            if inp.op != "const":
                np.add.at(scatter_buffer(inp), (node.attrs["rows"], node.attrs["cols"]), g)
            continue
        if op == "stack_rows":
            for i, inp in enumerate(node.inputs):
                if inp.op != "const":
                    accumulate(inp, g[i])
            continue
        in_vals = [values[id(i)] for i in node.inputs]
        local = _VJP[op](g, in_vals, values[id(node)], node.attrs)
        for inp, dg in zip(node.inputs, local):
            if inp.op == "const":
                continue
            accumulate(inp, dg)
    out = {}
    for w in wrt:
        if w.op != "leaf":
            raise NumericsError("gradient: wrt entries must be leaves")
        out[w] = grads.get(id(w), np.zeros(w.shape))
    if return_value:
        return out, values[id(root)]
    return out


def finite_difference_check(root, bindings, wrt, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    Reports the worst coordinate as |analytic - fd| / max(|analytic|, 1e-12).
    Never raises on mismatch; callers assert on the returned value.
    """
    analytic = gradient(root, bindings, wrt)
    worst = 0.0
    perturbed = dict(bindings)
    for w in wrt:
        base = np.array(bindings[w], dtype=np.float64)
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            perturbed[w] = base
            hi = float(evaluate(root, perturbed))
            flat[i] = orig - eps
            lo = float(evaluate(root, perturbed))
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * eps)
        a = np.asarray(analytic[w], dtype=np.float64)
        err = np.abs(a - fd) / np.maximum(np.abs(a), 1e-12)
        # Both sides numerically zero: call it exact rather than 0/1e-12 noise.
        err = np.where((np.abs(a) < 1e-12) & (np.abs(fd) < 1e-10), 0.0, err)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
