"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the handful of operations the relation pipeline needs: elementwise
arithmetic, relu, matrix-vector products, softmax, mean-L1 distance,
concatenation, and a few fused loss kernels. No broadcasting beyond
scalar-times-vector, no batching, no fusion -- determinism over speed.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array with an accumulated gradient of identical shape.

    `grad` is all-zeros right after creation and after `zero_grad`.
    Graph edges (`_parents`, `_vjp`) are recorded only while gradients are
    enabled and some input requires them.
    """

    __slots__ = ("value", "_grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def grad(self) -> np.ndarray:
        # allocated lazily: pure inference never touches gradients, so
        # skipping the eager zeros saves a large share of forward cost
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def detach(self) -> "Tensor":
        """Value-only copy, cut off from the graph."""
        return Tensor(self.value.copy())

    def backward(self):
        """Accumulate d(self)/d(ancestor) into every ancestor's grad.

        Repeated calls accumulate. Only defined for scalar outputs.
        """
        if self.value.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.value.shape}"
            )
        topo = _toposort(self)
        adjoint = {id(self): np.ones_like(self.value)}
        for node in reversed(topo):
            a = adjoint.pop(id(node), None)
            if a is None:
                continue
            node.grad += a
            if node._vjp is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(a)):
                if contrib is None:
                    continue
                key = id(parent)
                prev = adjoint.get(key)
                adjoint[key] = contrib if prev is None else prev + contrib

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _track(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _node(value, parents, vjp) -> Tensor:
    if _track(*parents):
        return Tensor(value, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(value)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}"
        )


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0  # subgradient at exactly 0 is 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def smul(s: Tensor, v: Tensor) -> Tensor:
    """Scalar tensor times arbitrary tensor (the only broadcast allowed)."""
    if s.value.size != 1:
        raise ValueError(f"smul: first argument must be scalar, got {s.shape}")
    sv, vv = float(s.value), v.value
    return _node(
        sv * vv,
        (s, v),
        lambda g: (np.asarray(np.sum(g * vv)).reshape(s.value.shape), g * sv),
    )


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatcher for the pointwise kernels: add, mul, relu, scale."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matvec(W: Tensor, x: Tensor) -> Tensor:
    if W.value.ndim != 2 or x.value.ndim != 1:
        raise ValueError(
            f"matvec: expected matrix and vector, got {W.shape} and {x.shape}"
        )
    if W.value.shape[1] != x.value.shape[0]:
        raise ValueError(
            f"matvec: inner dimensions disagree, {W.shape} vs {x.shape}"
        )
    Wv, xv = W.value, x.value
    return _node(Wv @ xv, (W, x), lambda g: (np.outer(g, xv), Wv.T @ g))


def matvec_t(W: Tensor, x: Tensor) -> Tensor:
    """W^T @ x for an m-by-n matrix W and m-vector x (no materialized transpose)."""
    if W.value.ndim != 2 or x.value.ndim != 1:
        raise ValueError(
            f"matvec_t: expected matrix and vector, got {W.shape} and {x.shape}"
        )
    if W.value.shape[0] != x.value.shape[0]:
        raise ValueError(
            f"matvec_t: inner dimensions disagree, {W.shape} vs {x.shape}"
        )
    Wv, xv = W.value, x.value
    return _node(Wv.T @ xv, (W, x), lambda g: (np.outer(xv, g), Wv @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "dot")
    av, bv = a.value, b.value
    return _node(np.dot(av, bv), (a, b), lambda g: (g * bv, g * av))


def softmax(z: Tensor) -> Tensor:
    if z.value.ndim != 1 or z.value.size < 1:
        raise ValueError(f"softmax: expected a nonempty vector, got {z.shape}")
    if not np.all(np.isfinite(z.value)):
        raise ValueError("softmax: non-finite input")
    shifted = z.value - z.value.max()  # max-subtraction for stability
    e = np.exp(shifted)
    p = e / e.sum()

    def vjp(g):
        return ((g - np.dot(g, p)) * p,)

    return _node(p, (z,), vjp)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 at ties."""
    _check_same_shape(a, b, "l1_distance")
    diff = a.value - b.value
    n = diff.size
    s = np.sign(diff) / n

    def vjp(g):
        gs = float(g) * s
        return (gs, -gs)

    return _node(np.abs(diff).mean(), (a, b), vjp)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError(
            f"concat: expected 1-D inputs, got {a.shape} and {b.shape}"
        )
    na = a.value.shape[0]

    def vjp(g):
        return (g[:na], g[na:])

    return _node(np.concatenate([a.value, b.value]), (a, b), vjp)


def tsum(a: Tensor) -> Tensor:
    return _node(a.value.sum(), (a,), lambda g: (np.full_like(a.value, float(g)),))


def sum_tensors(tensors) -> Tensor:
    """N-ary sum of same-shape tensors (cheap loss aggregation)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("sum_tensors: empty input")
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "sum_tensors")
    total = tensors[0].value.copy()
    for t in tensors[1:]:
        total += t.value
    return _node(total, tuple(tensors), lambda g: tuple(g for _ in tensors))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise ValueError("log: non-positive input")
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def pick(a: Tensor, i: int) -> Tensor:
    if a.value.ndim != 1:
        raise ValueError(f"pick: expected a vector, got {a.shape}")
    if not 0 <= i < a.value.shape[0]:
        raise ValueError(f"pick: index {i} out of range for length {a.value.shape[0]}")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[i] = float(g)
        return (out,)

    return _node(a.value[i], (a,), vjp)


def vmax(a: Tensor) -> Tensor:
    """Maximum entry; gradient routed to the first argmax."""
    if a.value.ndim != 1 or a.value.size < 1:
        raise ValueError(f"vmax: expected a nonempty vector, got {a.shape}")
    k = int(np.argmax(a.value))

    def vjp(g):
        out = np.zeros_like(a.value)
        out[k] = float(g)
        return (out,)

    return _node(a.value[k], (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(p, (a,), lambda g: (g * p * (1.0 - p),))


# ---------------------------------------------------------------------------
# fused loss kernels


def cross_entropy_logits(z: Tensor, label: int) -> Tensor:
    """logsumexp(z) - z[label], with the usual softmax-minus-onehot gradient."""
    if z.value.ndim != 1:
        raise ValueError(f"cross_entropy_logits: expected a vector, got {z.shape}")
    if not 0 <= label < z.value.shape[0]:
        raise ValueError(f"cross_entropy_logits: bad label {label}")
    m = z.value.max()
    e = np.exp(z.value - m)
    Z = e.sum()
    p = e / Z

    def vjp(g):
        out = p * float(g)
        out[label] -= float(g)
        return (out,)

    return _node(m + np.log(Z) - z.value[label], (z,), vjp)


_BCE_EPS = 1e-7


def weighted_bce(p: Tensor, targets, weights) -> Tensor:
    """Per-class weighted binary cross-entropy over a probability vector.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; clamped
    entries get zero gradient.
    """
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.value.shape != t.shape or p.value.shape != w.shape:
        raise ValueError("weighted_bce: shape mismatch")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("weighted_bce: targets must be binary")
    pc = np.clip(p.value, _BCE_EPS, 1.0 - _BCE_EPS)
    inside = (p.value > _BCE_EPS) & (p.value < 1.0 - _BCE_EPS)
    loss = -(w * (t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))).sum()

    def vjp(g):
        return (float(g) * w * (-t / pc + (1.0 - t) / (1.0 - pc)) * inside,)

    return _node(loss, (p,), vjp)
