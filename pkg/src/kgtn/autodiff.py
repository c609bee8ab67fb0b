"""Dense-matrix expression tape with reverse-mode gradients.

Everything is a 2-D float64 array ("matrix").  A `Tape` records primitive
operations as they are built; `evaluate` runs the forward pass and
`gradients` runs one reverse sweep from a scalar (1x1) root.  The tape is
rebuilt per training step, node values are never mutated in place, and any
NaN/Inf aborts with `NumericsError` instead of propagating.

The primitive set is exactly what the rest of the package needs; there is
no general broadcasting - only scalar-times-matrix, row-vector bias adds,
and same-shape elementwise ops.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import NumericsError, ShapeError, UnboundInputError

LOG_GUARD = 1e-12
NORM_GUARD = 1e-12


def as_matrix(value, what="matrix"):
    """Coerce to a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.ascontiguousarray(value, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{what}: expected a 2-D array, got ndim={m.ndim}")
    if m.size and not (np.isfinite(m.min()) and np.isfinite(m.max())):
        raise NumericsError(f"{what}: contains NaN or Inf")
    return m


def _all_finite(m):
    # min/max both propagate NaN and catch +-Inf without allocating a mask.
    return m.size == 0 or (np.isfinite(m.min()) and np.isfinite(m.max()))


class ParamSet:
    """Named trainable matrices plus per-parameter momentum buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.values:
            raise ValueError(f"parameter {name!r} already registered")
        m = as_matrix(value, f"parameter {name!r}")
        self.values[name] = m
        self.momentum[name] = np.zeros_like(m)
        return m

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        m = as_matrix(value, f"parameter {name!r}")
        if name in self.values and self.values[name].shape != m.shape:
            raise ShapeError(
                f"parameter {name!r}: shape {m.shape} != existing {self.values[name].shape}"
            )
        self.values[name] = m
        self.momentum.setdefault(name, np.zeros_like(m))

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self):
        return list(self.values)

    def snapshot(self):
        """Deep copy of the current values (momentum excluded)."""
        return {k: v.copy() for k, v in self.values.items()}


class Expr:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx", "shape")

    def __init__(self, tape, idx, shape):
        self.tape = tape
        self.idx = idx
        self.shape = shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        node = self.tape._nodes[self.idx]
        return f"Expr(#{self.idx} {node.kind} {self.shape[0]}x{self.shape[1]})"


class _Node:
    __slots__ = ("kind", "inputs", "shape", "aux")

    def __init__(self, kind, inputs, shape, aux=None):
        self.kind = kind
        self.inputs = inputs
        self.shape = shape
        self.aux = aux


class Tape:
    """Append-only computation record; node inputs always precede the node."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._named: dict[str, int] = {}

    def _emit(self, kind, inputs, shape, aux=None):
        if shape[0] < 0 or shape[1] < 0:
            raise ShapeError(f"{kind}: negative shape {shape}")
        self._nodes.append(_Node(kind, inputs, shape, aux))
        return Expr(self, len(self._nodes) - 1, shape)

    def input(self, name, shape):
        """Placeholder bound at evaluate() time.  One node per name."""
        key = "in:" + name
        if key in self._named:
            idx = self._named[key]
            if self._nodes[idx].shape != tuple(shape):
                raise ShapeError(f"input {name!r} redeclared with a different shape")
            return Expr(self, idx, self._nodes[idx].shape)
        e = self._emit("input", (), tuple(shape), aux=name)
        self._named[key] = e.idx
        return e

    def constant(self, value):
        m = as_matrix(value, "constant")
        return self._emit("const", (), m.shape, aux=m)

    def parameter(self, name, shape):
        """Named trainable leaf; value read from the ParamSet at evaluate()."""
        key = "p:" + name
        if key in self._named:
            idx = self._named[key]
            if self._nodes[idx].shape != tuple(shape):
                raise ShapeError(f"parameter {name!r} redeclared with a different shape")
            return Expr(self, idx, self._nodes[idx].shape)
        e = self._emit("param", (), tuple(shape), aux=name)
        self._named[key] = e.idx
        return e

    # -- execution ---------------------------------------------------------

    def _forward(self, upto, bindings, params):
        bindings = bindings or {}
        vals = [None] * (upto + 1)
        caches = {}
        for idx in range(upto + 1):
            node = self._nodes[idx]
            if node.kind == "input":
                if node.aux not in bindings:
                    raise UnboundInputError(f"input {node.aux!r} has no binding")
                v = as_matrix(bindings[node.aux], f"binding {node.aux!r}")
                if v.shape != node.shape:
                    raise ShapeError(
                        f"binding {node.aux!r}: shape {v.shape} != declared {node.shape}"
                    )
                vals[idx] = v
                continue
            if node.kind == "const":
                vals[idx] = node.aux
                continue
            if node.kind == "param":
                if params is None or node.aux not in params:
                    raise UnboundInputError(f"parameter {node.aux!r} not in ParamSet")
                v = params[node.aux]
                if v.shape != node.shape:
                    raise ShapeError(
                        f"parameter {node.aux!r}: shape {v.shape} != declared {node.shape}"
                    )
                vals[idx] = v
                continue
            fn = _FORWARD[node.kind]
            out = fn([vals[i] for i in node.inputs], node.aux)
            if isinstance(out, tuple):
                out, caches[idx] = out
            if not _all_finite(out):
                raise NumericsError(f"node #{idx} ({node.kind}) produced NaN/Inf")
            vals[idx] = out
        return vals, caches

    def evaluate(self, exprs, bindings=None, params=None):
        """Forward value of one expr, or a list of values for a list of exprs.

        Deterministic: identical bindings and parameters give bitwise-identical
        output.
        """
        single = isinstance(exprs, Expr)
        targets = [exprs] if single else list(exprs)
        upto = max(e.idx for e in targets)
        vals, _ = self._forward(upto, bindings, params)
        out = [vals[e.idx] for e in targets]
        return out[0] if single else out

    def gradients(self, root, wrt, bindings=None):
        """d(root)/d(p) for every parameter p in the ParamSet `wrt`.

        `root` must evaluate to a 1x1 matrix.  Parameters the root does not
        depend on get zero gradients.
        """
        if root.shape != (1, 1):
            raise ShapeError(f"gradients: root must be 1x1, got {root.shape}")
        vals, caches = self._forward(root.idx, bindings, wrt)
        adj = [None] * (root.idx + 1)
        adj[root.idx] = np.ones((1, 1))
        for idx in range(root.idx, -1, -1):
            g = adj[idx]
            node = self._nodes[idx]
            if g is None or not node.inputs:
                continue
            vjp = _VJP[node.kind]
            gins = vjp(g, [vals[i] for i in node.inputs], vals[idx], caches.get(idx), node.aux)
            for i, gi in zip(node.inputs, gins):
                if gi is None:
                    continue
                if not _all_finite(gi):
                    raise NumericsError(f"gradient at node #{idx} ({node.kind}) is NaN/Inf")
                adj[i] = gi if adj[i] is None else adj[i] + gi
        out = {}
        for name in wrt:
            idx = self._named.get("p:" + name)
            if idx is not None and idx <= root.idx and adj[idx] is not None:
                out[name] = adj[idx]
            else:
                out[name] = np.zeros_like(wrt[name])
        return out


# -- shape helpers ----------------------------------------------------------


def _same_tape(*exprs):
    t = exprs[0].tape
    for e in exprs[1:]:
        if e.tape is not t:
            raise ValueError("exprs belong to different tapes")
    return t


def _need_same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# -- primitive constructors --------------------------------------------------


def matmul(a, b):
    t = _same_tape(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return t._emit("matmul", (a.idx, b.idx), (a.shape[0], b.shape[1]))


def transpose(a):
    return a.tape._emit("transpose", (a.idx,), (a.shape[1], a.shape[0]))


def add(a, b):
    t = _same_tape(a, b)
    _need_same_shape("add", a, b)
    return t._emit("add", (a.idx, b.idx), a.shape)


def sub(a, b):
    t = _same_tape(a, b)
    _need_same_shape("sub", a, b)
    return t._emit("sub", (a.idx, b.idx), a.shape)


def mul(a, b):
    """Elementwise product (same shapes only)."""
    t = _same_tape(a, b)
    _need_same_shape("mul", a, b)
    return t._emit("mul", (a.idx, b.idx), a.shape)


def scalar_mul(c, a):
    """Fixed python scalar times matrix."""
    return a.tape._emit("scalar_mul", (a.idx,), a.shape, aux=float(c))


def scale(s, a):
    """Learnable 1x1 expr times matrix."""
    t = _same_tape(s, a)
    if s.shape != (1, 1):
        raise ShapeError(f"scale: scale operand must be 1x1, got {s.shape}")
    return t._emit("scale", (s.idx, a.idx), a.shape)


def concat_cols(a, b):
    t = _same_tape(a, b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts {a.shape[0]} != {b.shape[0]}")
    return t._emit("concat_cols", (a.idx, b.idx), (a.shape[0], a.shape[1] + b.shape[1]))


def sigmoid(a):
    return a.tape._emit("sigmoid", (a.idx,), a.shape)


def tanh(a):
    return a.tape._emit("tanh", (a.idx,), a.shape)


def row_sum(a):
    """Nx1 column of per-row sums."""
    return a.tape._emit("row_sum", (a.idx,), (a.shape[0], 1))


def mean(a):
    """1x1 mean over all entries."""
    if a.shape[0] * a.shape[1] == 0:
        raise ShapeError("mean: empty matrix")
    return a.tape._emit("mean", (a.idx,), (1, 1))


def squared_l2(a):
    """1x1 sum of squared entries."""
    return a.tape._emit("squared_l2", (a.idx,), (1, 1))


def softmax(a):
    """Row-wise softmax, stabilized by per-row max subtraction."""
    return a.tape._emit("softmax", (a.idx,), a.shape)


def softmax_cross_entropy(logits, labels):
    """1x1 mean cross-entropy of row-softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    return logits.tape._emit("softmax_xent", (logits.idx,), (1, 1), aux=labels)


def log_guarded(a):
    """Elementwise log(max(x, 1e-12)); gradient is zero in the guarded region."""
    return a.tape._emit("log_guarded", (a.idx,), a.shape)


def center_rows(a):
    """Subtract each row's mean from that row."""
    return a.tape._emit("center_rows", (a.idx,), a.shape)


def row_l2_normalize(a, what="row_l2_normalize"):
    """Divide each row by its L2 norm; near-zero rows raise NumericsError.

    `what` labels the operand in the error message ("features", "weights").
    """
    return a.tape._emit("row_l2_normalize", (a.idx,), a.shape, aux=what)


def add_rowvec(a, b):
    """Add a 1xN bias row to every row of a MxN matrix."""
    t = _same_tape(a, b)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_rowvec: bias {b.shape} does not match {a.shape}")
    return t._emit("add_rowvec", (a.idx, b.idx), a.shape)


def gru_cell(a, h, wz, uz, wr, ur, w, u):
    """Fused gated update (update/reset gates + candidate blend), one step.

    Backed by the compiled kernel when available; see `kgtn.backend`.
    """
    t = _same_tape(a, h, wz, uz, wr, ur, w, u)
    k, d = h.shape
    if a.shape != (k, 2 * d):
        raise ShapeError(f"gru_cell: messages {a.shape}, expected {(k, 2 * d)}")
    for name, e, want in (
        ("wz", wz, (d, 2 * d)),
        ("wr", wr, (d, 2 * d)),
        ("w", w, (d, 2 * d)),
        ("uz", uz, (d, d)),
        ("ur", ur, (d, d)),
        ("u", u, (d, d)),
    ):
        if e.shape != want:
            raise ShapeError(f"gru_cell: {name} is {e.shape}, expected {want}")
    idxs = (a.idx, h.idx, wz.idx, uz.idx, wr.idx, ur.idx, w.idx, u.idx)
    return t._emit("gru_cell", idxs, (k, d))


# -- forward / vjp tables -----------------------------------------------------


def _stable_softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _fw_softmax_xent(vals, labels):
    p = _stable_softmax(vals[0])
    picked = p[np.arange(p.shape[0]), labels]
    value = np.array([[-np.mean(np.log(np.maximum(picked, LOG_GUARD)))]])
    return value, p


def _vjp_softmax_xent(g, vals, out, p, labels):
    n = p.shape[0]
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return (g[0, 0] / n * grad,)


def _fw_row_l2_normalize(vals, aux):
    a = vals[0]
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    bad = np.nonzero(norms.ravel() < NORM_GUARD)[0]
    if bad.size:
        raise NumericsError(f"{aux}: row {bad[0]} has norm < {NORM_GUARD}")
    return a / norms, norms


def _vjp_row_l2_normalize(g, vals, y, norms, aux):
    dot = (g * y).sum(axis=1, keepdims=True)
    return ((g - y * dot) / norms,)


_FORWARD = {
    "matmul": lambda v, aux: v[0] @ v[1],
    "transpose": lambda v, aux: np.ascontiguousarray(v[0].T),
    "add": lambda v, aux: v[0] + v[1],
    "sub": lambda v, aux: v[0] - v[1],
    "mul": lambda v, aux: v[0] * v[1],
    "scalar_mul": lambda v, aux: aux * v[0],
    "scale": lambda v, aux: v[0][0, 0] * v[1],
    "concat_cols": lambda v, aux: np.concatenate(v, axis=1),
    "sigmoid": lambda v, aux: _sigmoid_np(v[0]),
    "tanh": lambda v, aux: np.tanh(v[0]),
    "row_sum": lambda v, aux: v[0].sum(axis=1, keepdims=True),
    "mean": lambda v, aux: np.array([[v[0].mean()]]),
    "squared_l2": lambda v, aux: np.array([[(v[0] * v[0]).sum()]]),
    "softmax": lambda v, aux: _stable_softmax(v[0]),
    "softmax_xent": _fw_softmax_xent,
    "log_guarded": lambda v, aux: np.log(np.maximum(v[0], LOG_GUARD)),
    "center_rows": lambda v, aux: v[0] - v[0].mean(axis=1, keepdims=True),
    "row_l2_normalize": _fw_row_l2_normalize,
    "add_rowvec": lambda v, aux: v[0] + v[1],
    "gru_cell": lambda v, aux: backend.gru_cell_forward(*v),
}


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_VJP = {
    "matmul": lambda g, v, out, c, aux: (g @ v[1].T, v[0].T @ g),
    "transpose": lambda g, v, out, c, aux: (np.ascontiguousarray(g.T),),
    "add": lambda g, v, out, c, aux: (g, g),
    "sub": lambda g, v, out, c, aux: (g, -g),
    "mul": lambda g, v, out, c, aux: (g * v[1], g * v[0]),
    "scalar_mul": lambda g, v, out, c, aux: (aux * g,),
    "scale": lambda g, v, out, c, aux: (
        np.array([[(g * v[1]).sum()]]),
        v[0][0, 0] * g,
    ),
    "concat_cols": lambda g, v, out, c, aux: (
        np.ascontiguousarray(g[:, : v[0].shape[1]]),
        np.ascontiguousarray(g[:, v[0].shape[1] :]),
    ),
    "sigmoid": lambda g, v, out, c, aux: (g * out * (1.0 - out),),
    "tanh": lambda g, v, out, c, aux: (g * (1.0 - out * out),),
    "row_sum": lambda g, v, out, c, aux: (np.repeat(g, v[0].shape[1], axis=1),),
    "mean": lambda g, v, out, c, aux: (np.full_like(v[0], g[0, 0] / v[0].size),),
    "squared_l2": lambda g, v, out, c, aux: (2.0 * g[0, 0] * v[0],),
    "softmax": lambda g, v, out, c, aux: (
        out * (g - (g * out).sum(axis=1, keepdims=True)),
    ),
    "softmax_xent": _vjp_softmax_xent,
    "log_guarded": lambda g, v, out, c, aux: (
        np.where(v[0] > LOG_GUARD, g / np.maximum(v[0], LOG_GUARD), 0.0),
    ),
    "center_rows": lambda g, v, out, c, aux: (g - g.mean(axis=1, keepdims=True),),
    "row_l2_normalize": _vjp_row_l2_normalize,
    "add_rowvec": lambda g, v, out, c, aux: (g, g.sum(axis=0, keepdims=True)),
    "gru_cell": lambda g, v, out, c, aux: backend.gru_cell_backward(g, *v, c),
}


# -- gradient checking --------------------------------------------------------


def finite_difference_check(expr, params, bindings=None, epsilon=1e-5):
    """Max relative error between analytic gradients and central differences.

    Perturbs every entry of every parameter by +-epsilon.  Relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tape = expr.tape
    analytic = tape.gradients(expr, params, bindings)
    worst = 0.0
    for name in params:
        p = params[name]
        flat = p.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = tape.evaluate(expr, bindings, params)[0, 0]
            flat[i] = orig - epsilon
            f_minus = tape.evaluate(expr, bindings, params)[0, 0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[name].ravel()[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
