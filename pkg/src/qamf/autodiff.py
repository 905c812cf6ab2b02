"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

Graphs are built define-by-run: every op returns a new node that remembers
its parents and how to push a gradient back to them. A graph is rebuilt per
use, which keeps variable set sizes trivial to handle. Only the primitives
the fusion networks and losses need are provided; there is no broadcasting
beyond explicit scalar operands and the row-bias case.
"""

import numpy as np

__all__ = [
    "Tensor", "AutodiffError", "ShapeMismatch", "NonFiniteValue",
    "as_tensor", "constant", "parameter",
    "add", "sub", "mul", "div", "scale", "matmul", "dot",
    "relu", "sigmoid", "exp", "log", "square", "cos", "arccos", "clamp",
    "softmax", "norm", "normalize", "tsum", "tmean", "concat",
    "reshape", "transpose", "add_bias", "row_norms", "normalize_rows",
    "backward", "grad_check", "grad_check_params", "GradCheckReport",
]

ARCCOS_EPS = 1e-7  # keeps d/dx arccos finite when |x| reaches 1


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {shapes}")


class NonFiniteValue(AutodiffError):
    def __init__(self, op):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


class Tensor:
    """A value node: float64 array, optional grad, and backward wiring."""

    __slots__ = ("value", "grad", "requires_grad", "_parents")

    def __init__(self, value, requires_grad=False, _parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.size != 1:
            raise ShapeMismatch("item", self.value.shape)
        return float(self.value.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def parameter(x):
    return Tensor(x, requires_grad=True)


def _make(op, value, *parents):
    """Build a result node; parents are (tensor, pull_fn) pairs."""
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(op)
    tracked = tuple((t, fn) for t, fn in parents if t.requires_grad)
    return Tensor(value, requires_grad=bool(tracked), _parents=tracked)


def _is_scalar(t):
    return t.value.ndim == 0 or t.value.size == 1


def _scalar_pull(t, fn):
    """Wrap a pull so a broadcast-scalar operand accumulates a scalar grad."""
    def pull(g):
        return np.sum(fn(g)).reshape(t.value.shape)
    return pull


def _binary_shapes(op, a, b):
    if a.value.shape == b.value.shape:
        return
    if _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeMismatch(op, a.value.shape, b.value.shape)


def _ew(op, a, b, fn, pull_a, pull_b):
    """Elementwise op with equal shapes or one scalar operand."""
    _binary_shapes(op, a, b)
    if _is_scalar(a) and not _is_scalar(b):
        pull_a = _scalar_pull(a, pull_a)
    if _is_scalar(b) and not _is_scalar(a):
        pull_b = _scalar_pull(b, pull_b)
    return _make(op, fn(a.value, b.value), (a, pull_a), (b, pull_b))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _ew("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _ew("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _ew("mul", a, b, lambda x, y: x * y,
               lambda g: g * bv, lambda g: g * av)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        return _ew("div", a, b, lambda x, y: x / y,
                   lambda g: g / bv, lambda g: -g * av / (bv * bv))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.value * c, (a, lambda g: g * c))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeMismatch("matmul", av.shape, bv.shape)
        return _make("matmul", av @ bv,
                     (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeMismatch("matmul", av.shape, bv.shape)
        return _make("matmul", av @ bv,
                     (a, lambda g: bv @ g), (b, lambda g: np.outer(av, g)))
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeMismatch("matmul", av.shape, bv.shape)
        return _make("matmul", av @ bv,
                     (a, lambda g: np.outer(g, bv)), (b, lambda g: av.T @ g))
    raise ShapeMismatch("matmul", av.shape, bv.shape)


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 1 or av.shape != bv.shape:
        raise ShapeMismatch("dot", av.shape, bv.shape)
    return _make("dot", av @ bv, (a, lambda g: g * bv), (b, lambda g: g * av))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.value))
    return _make("sigmoid", s, (a, lambda g: g * s * (1.0 - s)))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _make("exp", e, (a, lambda g: g * e))


def log(a):
    a = as_tensor(a)
    v = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        lv = np.log(v)
    return _make("log", lv, (a, lambda g: g / v))


def square(a):
    a = as_tensor(a)
    v = a.value
    return _make("square", v * v, (a, lambda g: 2.0 * g * v))


def cos(a):
    a = as_tensor(a)
    v = a.value
    return _make("cos", np.cos(v), (a, lambda g: -g * np.sin(v)))


def arccos(a):
    """arccos with the input clipped into [-1+eps, 1-eps].

    The clip keeps the derivative finite when a normalized dot product
    lands exactly on +-1; outside the clipped band the gradient is zero.
    """
    a = as_tensor(a)
    c = np.clip(a.value, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
    inside = np.abs(a.value) < 1.0 - ARCCOS_EPS
    d = -1.0 / np.sqrt(1.0 - c * c)
    return _make("arccos", np.arccos(c), (a, lambda g: g * d * inside))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    v = np.clip(a.value, lo, hi)
    inside = np.ones_like(a.value, dtype=bool)
    if lo is not None:
        inside &= a.value >= lo
    if hi is not None:
        inside &= a.value <= hi
    return _make("clamp", v, (a, lambda g: g * inside))


def softmax(a):
    """Softmax over a 1-D vector, computed with max subtraction."""
    a = as_tensor(a)
    if a.value.ndim != 1:
        raise ShapeMismatch("softmax", a.value.shape)
    z = a.value - np.max(a.value)
    e = np.exp(z)
    s = e / e.sum()
    return _make("softmax", s, (a, lambda g: s * (g - np.dot(g, s))))


def norm(a):
    """Euclidean norm of a 1-D vector as a scalar node.

    At the zero vector the (sub)gradient 0 is used, so ReLU-composed
    embeddings that collapse to zero do not poison a training step.
    """
    a = as_tensor(a)
    if a.value.ndim != 1:
        raise ShapeMismatch("norm", a.value.shape)
    n = float(np.linalg.norm(a.value))

    def pull(g):
        if n == 0.0:
            return np.zeros_like(a.value)
        return g * a.value / n

    return _make("norm", n, (a, pull))


def normalize(a):
    """Rescale a 1-D vector to unit Euclidean norm."""
    a = as_tensor(a)
    if a.value.ndim != 1:
        raise ShapeMismatch("normalize", a.value.shape)
    n = float(np.linalg.norm(a.value))
    if n == 0.0:
        raise AutodiffError("normalize: zero-norm input")
    u = a.value / n
    return _make("normalize", u, (a, lambda g: (g - np.dot(g, u) * u) / n))


def tsum(a):
    a = as_tensor(a)
    return _make("sum", a.value.sum(), (a, lambda g: np.full_like(a.value, float(g))))


def tmean(a):
    a = as_tensor(a)
    k = a.value.size
    return _make("mean", a.value.mean(),
                 (a, lambda g: np.full_like(a.value, float(g) / k)))


def concat(parts):
    """Concatenate 1-D vectors, or stack 2-D blocks along axis 0."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat")
    nd = parts[0].value.ndim
    if nd not in (1, 2) or any(p.value.ndim != nd for p in parts):
        raise ShapeMismatch("concat", *[p.value.shape for p in parts])
    if nd == 2 and len({p.value.shape[1] for p in parts}) != 1:
        raise ShapeMismatch("concat", *[p.value.shape for p in parts])
    value = np.concatenate([p.value for p in parts], axis=0)

    links = []
    start = 0
    for p in parts:
        n = p.value.shape[0]
        links.append((p, (lambda s, e: lambda g: g[s:e])(start, start + n)))
        start += n
    return _make("concat", value, *links)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.value.shape
    return _make("reshape", a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def transpose(a):
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose", a.value.shape)
    return _make("transpose", a.value.T, (a, lambda g: g.T))


def add_bias(mat, vec):
    """Add a vector to every row of a matrix (the batched-affine bias)."""
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.value.ndim != 2 or vec.value.ndim != 1 \
            or mat.value.shape[1] != vec.value.shape[0]:
        raise ShapeMismatch("add_bias", mat.value.shape, vec.value.shape)
    return _make("add_bias", mat.value + vec.value[None, :],
                 (mat, lambda g: g), (vec, lambda g: g.sum(axis=0)))


def row_norms(mat):
    """Euclidean norm of every row of a 2-D matrix (subgradient 0 at zero)."""
    mat = as_tensor(mat)
    if mat.value.ndim != 2:
        raise ShapeMismatch("row_norms", mat.value.shape)
    n = np.linalg.norm(mat.value, axis=1)

    def pull(g):
        safe = np.where(n == 0.0, 1.0, n)
        return (np.where(n == 0.0, 0.0, g) / safe)[:, None] * mat.value

    return _make("row_norms", n, (mat, pull))


def normalize_rows(mat):
    """Rescale every row of a 2-D matrix to unit Euclidean norm."""
    mat = as_tensor(mat)
    if mat.value.ndim != 2:
        raise ShapeMismatch("normalize_rows", mat.value.shape)
    n = np.linalg.norm(mat.value, axis=1)
    if np.any(n == 0.0):
        raise AutodiffError("normalize_rows: zero-norm row")
    u = mat.value / n[:, None]

    def pull(g):
        return (g - np.sum(g * u, axis=1, keepdims=True) * u) / n[:, None]

    return _make("normalize_rows", u, (mat, pull))


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into .grad for every reachable node.

    root must be scalar. Each node is visited exactly once, in reverse
    topological order, so shared subexpressions accumulate additively.
    """
    root = as_tensor(root)
    if root.value.size != 1:
        raise ShapeMismatch("backward", root.value.shape)
    order = _toposort(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, pull in node._parents:
            contrib = pull(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contrib


class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    def __init__(self, max_rel_err, tol, worst=None):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.worst = worst  # (array index, flat element index)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"tol={self.tol:.1e}, passed={self.passed})")


def grad_check_params(f, params, h=1e-5, tol=1e-4):
    """Gradient-check a closure against a dict of live parameter tensors.

    f() must rebuild the graph from the current parameter values and return
    a scalar node. Every element of every parameter is perturbed in place
    with a central difference; values are restored afterwards.
    """
    names = list(params)
    for p in params.values():
        p.grad = None
    out = f()
    backward(out)
    analytic = {n: (np.zeros_like(params[n].value) if params[n].grad is None
                    else params[n].grad.copy()) for n in names}

    max_rel = 0.0
    worst = None
    for n in names:
        flat = params[n].value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            step = h * (1.0 + abs(orig))
            flat[j] = orig + step
            f_plus = f().item()
            flat[j] = orig - step
            f_minus = f().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[n].reshape(-1)[j]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst = (n, j)
    return GradCheckReport(max_rel, tol, worst)


def grad_check(f, point, h=1e-5, tol=1e-4):
    """Check the analytic gradient of a scalar function of arrays.

    f maps a list of Tensors to a scalar Tensor; point is the list of
    numpy arrays to evaluate at. Steps are scaled per element as
    h * (1 + |x|); relative error is |a-n| / max(1e-8, |a|+|n|).
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    params = [parameter(p.copy()) for p in arrays]
    out = f(params)
    backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                for p in params]

    def eval_at(mod_arrays):
        return f([constant(a) for a in mod_arrays]).item()

    max_rel = 0.0
    worst = None
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            step = h * (1.0 + abs(flat[j]))
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] = flat[j] + step
            f_plus = eval_at(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - step
            f_minus = eval_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
    return GradCheckReport(max_rel, tol, worst)
