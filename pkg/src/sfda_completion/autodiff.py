"""Minimal reverse-mode autodiff over float64 numpy arrays.

Design notes:

* A ``Tensor`` records its value, its parent tensors, and one vector-Jacobian
  callback per parent. ``backward`` walks the graph once in reverse
  topological order; every operation is deterministic, so repeated runs on
  identical inputs produce bit-identical values and gradients.
* Selection operations (nearest-neighbor matching, max pooling, relu) treat
  their selections as constants during backward: the gradient flows only
  through the selected entries, ties resolve to the lowest index, and the
  derivative of relu at exactly zero is defined as zero.
* ``finite_diff_check`` compares analytic gradients against central
  differences. Coordinates whose perturbation flips any recorded selection
  (an argmin/argmax index or a relu activation pattern) sit on a kink of the
  piecewise-smooth loss; they are excluded from the pass/fail decision and
  reported separately.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import CongruenceError, NonDeterministicLossError
from . import geometry

# ---------------------------------------------------------------------------
# selection tracing (used by finite_diff_check to detect kink crossings)

_TRACE = None


@contextmanager
def selection_trace():
    """Collect (tag, bytes) records of every selection made during forward."""
    global _TRACE
    prev = _TRACE
    _TRACE = []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _record_selection(tag, payload):
    if _TRACE is not None:
        _TRACE.append((tag, payload))


# ---------------------------------------------------------------------------
# tensor and graph


class Tensor:
    """A node in the computation graph holding a float64 ndarray value."""

    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={not self.parents})"

    # small amount of operator sugar; full op set lives in module functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(value):
    """Wrap an array as a leaf tensor (no gradient will reach it by name)."""
    return Tensor(np.array(value, dtype=np.float64))


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# parameter containers


class ParameterSet:
    """Ordered name -> leaf Tensor mapping for one model's parameters."""

    def __init__(self, tensors):
        self._tensors = {}
        for name, t in tensors.items():
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
            self._tensors[str(name)] = t

    @classmethod
    def from_arrays(cls, arrays):
        return cls({n: Tensor(np.array(v, dtype=np.float64)) for n, v in arrays.items()})

    def to_arrays(self):
        return {n: np.array(t.value) for n, t in self._tensors.items()}

    def copy(self):
        """Fresh leaf tensors with copied values."""
        return ParameterSet.from_arrays(self.to_arrays())

    def names(self):
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def signature(self):
        return tuple((n, t.value.shape) for n, t in self._tensors.items())

    def congruent_with(self, other):
        return self.signature() == other.signature()

    def require_congruent(self, other, context="parameter sets"):
        """Raise CongruenceError listing every name/shape mismatch."""
        if self.congruent_with(other):
            return
        mine = {n: t.value.shape for n, t in self.items()}
        theirs = {n: t.value.shape for n, t in other.items()}
        problems = []
        for n in mine:
            if n not in theirs:
                problems.append(f"{n}: missing from second set")
            elif mine[n] != theirs[n]:
                problems.append(f"{n}: shape {mine[n]} vs {theirs[n]}")
        for n in theirs:
            if n not in mine:
                problems.append(f"{n}: missing from first set")
        if not problems:
            # signatures differed but names and shapes all match pairwise
            problems.append("same names and shapes but different order")
        raise CongruenceError(f"{context} are not congruent: " + "; ".join(problems))


@dataclass
class GradientRecord:
    """Gradients keyed by parameter name, aligned with one ParameterSet."""

    grads: dict

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def names(self):
        return list(self.grads.keys())


# ---------------------------------------------------------------------------
# operations

def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shapes {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value
    av, bv = a.value, b.value
    return Tensor(out, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def add(a, b):
    """Elementwise add; also supports (n, m) + (m,) bias and scalar + any."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return Tensor(a.value + b.value, (a, b), (lambda g: g, lambda g: g))
    if a.value.ndim == 2 and b.value.ndim == 1 and sa[1] == sb[0]:
        return Tensor(a.value + b.value, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))
    if b.value.ndim == 0:
        return Tensor(a.value + b.value, (a, b), (lambda g: g, lambda g: g.sum()))
    if a.value.ndim == 0:
        return Tensor(a.value + b.value, (a, b), (lambda g: g.sum(), lambda g: g))
    raise ValueError(f"add shapes {sa} + {sb} not supported")


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shapes {a.value.shape} - {b.value.shape}")
    return Tensor(a.value - b.value, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    """Elementwise product, same shape or 0-d scalar on either side."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    av, bv = a.value, b.value
    if sa == sb:
        return Tensor(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))
    if sb == ():
        return Tensor(av * bv, (a, b), (lambda g: g * bv, lambda g: (g * av).sum()))
    if sa == ():
        return Tensor(av * bv, (a, b), (lambda g: (g * bv).sum(), lambda g: g * av))
    raise ValueError(f"mul shapes {sa} * {sb} not supported")


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return Tensor(a.value * c, (a,), (lambda g: g * c,))


def relu(a):
    a = _as_tensor(a)
    mask = a.value > 0.0  # derivative at exactly 0 is 0
    _record_selection("relu", np.packbits(mask.reshape(-1)).tobytes())
    return Tensor(a.value * mask, (a,), (lambda g: g * mask,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out * out),))


def max_over_points(a):
    """Column-wise max over the leading (point) axis: (n, c) -> (c,).

    The argmax per column is frozen during backward; ties take the lowest
    row index (first occurrence).
    """
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ValueError(f"max_over_points expects (n, c), got {a.value.shape}")
    idx = np.argmax(a.value, axis=0)
    _record_selection("max_over_points", idx.tobytes())
    out = a.value[idx, np.arange(a.value.shape[1])]
    n, c = a.value.shape

    def vjp(g):
        ga = np.zeros((n, c))
        ga[idx, np.arange(c)] = g
        return ga

    return Tensor(out, (a,), (vjp,))


def concat_cols(tensors):
    """Concatenate (n, ci) tensors along the feature axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_cols needs at least one tensor")
    n = ts[0].value.shape[0]
    for t in ts:
        if t.value.ndim != 2 or t.value.shape[0] != n:
            raise ValueError("concat_cols expects (n, ci) tensors with equal n")
    widths = [t.value.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.value for t in ts], axis=1)

    def make_vjp(k):
        return lambda g: g[:, offsets[k]:offsets[k + 1]]

    return Tensor(out, tuple(ts), tuple(make_vjp(k) for k in range(len(ts))))


def gather_rows(a, idx):
    """Select rows by index, with scatter-add backward: (n, c) -> (k, c)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2 or idx.ndim != 1:
        raise ValueError("gather_rows expects a (n, c) tensor and 1-d indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise ValueError("gather_rows index out of range")
    shape = a.value.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return ga

    return Tensor(a.value[idx], (a,), (vjp,))


def broadcast_row(v, n):
    """Tile a (c,) vector into (n, c); backward sums over the rows."""
    v = _as_tensor(v)
    if v.value.ndim != 1:
        raise ValueError(f"broadcast_row expects (c,), got {v.value.shape}")
    out = np.broadcast_to(v.value, (int(n), v.value.shape[0])).copy()
    return Tensor(out, (v,), (lambda g: g.sum(axis=0),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def sum_all(a):
    a = _as_tensor(a)
    shape = a.value.shape
    return Tensor(a.value.sum(), (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    a = _as_tensor(a)
    shape = a.value.shape
    n = a.value.size
    if n == 0:
        raise ValueError("mean_all of an empty tensor")
    return Tensor(
        a.value.mean(), (a,), (lambda g: np.broadcast_to(g / n, shape).copy(),)
    )


def dot(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.value.shape != b.value.shape or a.value.ndim != 1:
        raise ValueError(f"dot shapes {a.value.shape} . {b.value.shape}")
    av, bv = a.value, b.value
    return Tensor(av @ bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def sqrt_scalar(a):
    a = _as_tensor(a)
    if a.value.shape != ():
        raise ValueError("sqrt_scalar expects a 0-d tensor")
    if a.value <= 0.0:
        raise ValueError("sqrt_scalar requires a positive value")
    out = np.sqrt(a.value)
    return Tensor(out, (a,), (lambda g: g / (2.0 * out),))


def div(a, b):
    """Scalar division of 0-d tensors."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.value.shape != () or b.value.shape != ():
        raise ValueError("div expects 0-d tensors")
    if b.value == 0.0:
        raise ValueError("division by zero")
    av, bv = a.value, b.value
    return Tensor(av / bv, (a, b), (lambda g: g / bv, lambda g: -g * av / (bv * bv)))


def min_sq_dists(x, y):
    """Per-row nearest squared distance from x into y: (n, 3) -> (n,).

    The match indices are computed once on the forward values (exact scan
    when a selection trace is active, so tie margins are honest on small
    probes) and treated as constants during backward. Gradient flows to both
    clouds through the matched pairs only.
    """
    x = _as_tensor(x)
    y = _as_tensor(y)
    xv, yv = x.value, y.value
    method = "exact" if _TRACE is not None else "auto"
    d, idx = geometry.nearest_sq_dists(xv, yv, method=method)
    _record_selection("min_sq_dists", idx.tobytes())
    diff = xv - yv[idx]  # (n, 3)
    m = yv.shape[0]

    def vjp_x(g):
        return (2.0 * g)[:, None] * diff

    def vjp_y(g):
        gy = np.zeros((m, 3))
        np.add.at(gy, idx, (-2.0 * g)[:, None] * diff)
        return gy

    return Tensor(d, (x, y), (vjp_x, vjp_y))


# ---------------------------------------------------------------------------
# backward


def backward(loss, params):
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Args:
        loss: 0-d (or single-element) Tensor.
        params: ParameterSet whose leaf tensors may or may not appear in the
            graph. Parameters not reachable from the loss get zero gradients.

    Returns:
        GradientRecord with one array per parameter, same shapes.
    """
    loss = _as_tensor(loss)
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")

    # iterative post-order topological sort
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    adjoint = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topo):
        g = adjoint.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            acc = adjoint.get(id(parent))
            if acc is None:
                # copy: identity vjps return the upstream array itself, and
                # accumulating in place into an alias would corrupt siblings
                adjoint[id(parent)] = np.array(contrib)
            else:
                acc += contrib

    grads = {}
    for name, t in params.items():
        g = adjoint.get(id(t))
        grads[name] = np.array(g) if g is not None else np.zeros_like(t.value)
    return GradientRecord(grads)


# ---------------------------------------------------------------------------
# finite difference checking


@dataclass
class FiniteDiffReport:
    """Outcome of comparing analytic gradients to central differences."""

    passed: bool
    max_rel_err: dict
    excluded: list = field(default_factory=list)
    step: float = 1e-6
    tolerance: float = 1e-4

    def worst(self):
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0


def _traced_eval(loss_fn, params):
    with selection_trace() as trace:
        out = loss_fn(params)
    out = _as_tensor(out)
    if out.value.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    return float(out.value), list(trace), out


def finite_diff_check(loss_fn, params, step=1e-6, tolerance=1e-4):
    """Check analytic gradients of loss_fn against central differences.

    The loss is evaluated twice at the base point first; any difference in
    value or in the recorded selections means loss_fn is not deterministic,
    which makes finite differencing meaningless, so that raises instead of
    reporting a failure. Coordinates where the +step and -step evaluations
    disagree on selections cross a kink and are excluded from the pass/fail
    decision; they are listed in the report.

    Args:
        loss_fn: callable(ParameterSet) -> scalar Tensor. Must be pure.
        params: base point.
        step: central difference half-step.
        tolerance: max allowed relative error per coordinate.

    Returns:
        FiniteDiffReport with per-parameter max relative errors.

    Raises:
        NonDeterministicLossError: if two base evaluations disagree.
    """
    v1, t1, out = _traced_eval(loss_fn, params)
    v2, t2, _ = _traced_eval(loss_fn, params)
    if v1 != v2 or t1 != t2:
        raise NonDeterministicLossError(
            "loss_fn returned different values or selections on identical inputs"
        )
    analytic = backward(out, params)

    base = params.to_arrays()
    max_err = {}
    excluded = []
    for name, arr in base.items():
        flat = arr.reshape(-1)
        an_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            vp, tp, _ = _traced_eval(loss_fn, ParameterSet.from_arrays(base))
            flat[i] = orig - step
            vm, tm, _ = _traced_eval(loss_fn, ParameterSet.from_arrays(base))
            flat[i] = orig
            if tp != tm:
                excluded.append((name, i))
                continue
            fd = (vp - vm) / (2.0 * step)
            an = float(an_flat[i])
            err = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            if err > worst:
                worst = err
        max_err[name] = worst
    passed = all(e <= tolerance for e in max_err.values())
    return FiniteDiffReport(
        passed=passed,
        max_rel_err=max_err,
        excluded=excluded,
        step=step,
        tolerance=tolerance,
    )
