"""
Reverse-mode differentiation over numpy kernels.

Every differentiable operation returns a Node holding its value, the
parent Nodes it was computed from and a backward rule mapping the
output gradient to one gradient per parent. backward() walks the
recorded graph in reverse topological order. finite_diff_check() is the
independent oracle: central differences compared against backward().
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import numerics
from numerics import ContractError, DimensionError, Tensor


logger = logging.getLogger(__name__)


class Node:
    """A value in the recorded computation graph."""

    __slots__ = ('value', 'parents', 'backward_rule', 'name', 'requires_grad')

    # ndarray (op) Node must dispatch to the Node's reflected operator
    __array_ufunc__ = None

    def __init__(self, value: Tensor, parents: Sequence['Node'] = (),
                 backward_rule: Optional[Callable] = None, name: Optional[str] = None,
                 requires_grad: bool = False):
        self.value = value
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ''
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


class Parameter(Node):
    """Named trainable leaf."""

    __slots__ = ()

    def __init__(self, value: Tensor, name: str):
        super().__init__(np.asarray(value, order='C'), name=name, requires_grad=True)


ArrayLike = Union[Node, Tensor, float]


def constant(value) -> Node:
    """Wrap an array as a leaf that takes no gradient."""
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value))


def make_node(value: Tensor, parents: Sequence[Node], rule: Callable) -> Node:
    """
    Record an operation result.

    The parents and rule are kept only when some parent needs a gradient,
    so constant-only subgraphs do not hold on to their inputs.
    """
    if any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum grad over the axes that broadcasting expanded to reach shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _cast(grad: Tensor, like: Node) -> Tensor:
    return grad.astype(like.value.dtype, copy=False)


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = constant(a), constant(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.value + b.value, (a, b), rule)


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = constant(a), constant(b)

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_node(a.value - b.value, (a, b), rule)


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a, b = constant(a), constant(b)

    def rule(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return make_node(a.value * b.value, (a, b), rule)


def neg(a: ArrayLike) -> Node:
    a = constant(a)
    return make_node(-a.value, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,))


def softplus(a: ArrayLike) -> Node:
    a = constant(a)
    out = numerics.softplus(a.value)
    return make_node(out, (a,), lambda g: (g * numerics.sigmoid(a.value),))


def sigmoid(a: ArrayLike) -> Node:
    a = constant(a)
    out = numerics.sigmoid(a.value)
    return make_node(out, (a,), lambda g: (g * out * (1 - out),))


def silu(a: ArrayLike) -> Node:
    a = constant(a)
    s = numerics.sigmoid(a.value)
    out = a.value * s

    def rule(g):
        return (g * (s + a.value * s * (1 - s)),)

    return make_node(out, (a,), rule)


def gelu(a: ArrayLike) -> Node:
    a = constant(a)
    out = numerics.gelu(a.value)
    return make_node(out, (a,), lambda g: (_cast(g * numerics.gelu_grad(a.value), a),))


# ---------------------------------------------------------------- linear algebra

def linear(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Node:
    """Differentiable numerics.linear."""
    x, w = constant(x), constant(w)
    b = constant(b) if b is not None else None
    out = numerics.linear(x.value, w.value, None if b is None else b.value)
    din, dout = w.shape

    def rule(g):
        g2 = g.reshape(-1, dout).astype(np.float64)
        gx = (g2 @ w.value.astype(np.float64).T).reshape(x.shape)
        gw = x.value.reshape(-1, din).astype(np.float64).T @ g2
        grads = [_cast(gx, x), _cast(gw, w)]
        if b is not None:
            grads.append(_cast(g2.sum(axis=0), b))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, rule)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-6) -> Node:
    """Differentiable numerics.layer_norm over the last axis."""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    xhat, inv_std = numerics.layer_norm_stats(x.value, eps)
    dtype = numerics.result_dtype(x.value, gamma.value, beta.value)
    g64 = gamma.value.astype(np.float64)
    out = (xhat * g64 + beta.value.astype(np.float64)).astype(dtype)

    def rule(g):
        g = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * g64
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return _cast(gx, x), _cast(ggamma, gamma), _cast(gbeta, beta)

    return make_node(out, (x, gamma, beta), rule)


def einsum(subscripts: str, a: ArrayLike, b: ArrayLike) -> Node:
    """
    Two-operand einsum whose every input index also appears in the other
    operand or the output, so each gradient is itself an einsum.
    """
    a, b = constant(a), constant(b)
    inputs, out_sub = subscripts.replace(' ', '').split('->')
    sa, sb = inputs.split(',')
    dtype = numerics.result_dtype(a.value, b.value)
    out = np.einsum(subscripts, a.value.astype(np.float64), b.value.astype(np.float64)).astype(dtype)

    def rule(g):
        g = g.astype(np.float64)
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.value.astype(np.float64))
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.value.astype(np.float64))
        return _cast(ga, a), _cast(gb, b)

    return make_node(out, (a, b), rule)


# ---------------------------------------------------------------- shape ops

def astype(a: ArrayLike, dtype) -> Node:
    a = constant(a)
    if a.value.dtype == dtype:
        return a
    return make_node(a.value.astype(dtype), (a,), lambda g: (_cast(g, a),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Node:
    a = constant(a)
    return make_node(a.value.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Sequence[int]) -> Node:
    a = constant(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.value, axes))
    return make_node(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Node:
    a = constant(a)
    out = np.ascontiguousarray(np.broadcast_to(a.value, tuple(shape)))
    return make_node(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(nodes: Sequence[ArrayLike], axis: int) -> Node:
    nodes = [constant(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis))

    return make_node(out, nodes, rule)


def take(a: ArrayLike, index) -> Node:
    """Basic (slice / integer) indexing."""
    a = constant(a)
    out = np.ascontiguousarray(a.value[index])

    def rule(g):
        full = np.zeros_like(a.value)
        full[index] += g
        return (full,)

    return make_node(out, (a,), rule)


def rot90(a: ArrayLike, k: int, axes: Tuple[int, int] = (1, 2)) -> Node:
    """Counterclockwise rotation by k quarter turns in the plane of axes."""
    a = constant(a)
    out = np.ascontiguousarray(np.rot90(a.value, k, axes=axes))
    return make_node(out, (a,), lambda g: (np.ascontiguousarray(np.rot90(g, -k, axes=axes)),))


# ---------------------------------------------------------------- reductions

def sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = constant(a)
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_node(out, (a,), rule)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Node:
    a = constant(a)
    count = a.value.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def log_softmax_nll(logits: ArrayLike, labels: np.ndarray) -> Node:
    """Mean over rows of -log softmax(logits)[label], via log-sum-exp."""
    logits = constant(logits)
    z = logits.value.astype(np.float64)
    shift = z.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(z - shift).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - z[rows, labels]))

    def rule(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, labels] -= 1.0
        return (_cast(probs * (float(g) / z.shape[0]), logits),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


# ---------------------------------------------------------------- backward

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _param_key(node: Node):
    return node.name if node.name is not None else id(node)


def backward(loss: Node, params: Optional[Iterable[Node]] = None) -> Dict:
    """
    Gradients of a scalar loss with respect to every reachable parameter.

    Args:
        loss: scalar-valued Node
        params: parameters that must appear in the result; those not
            reachable from loss get a zero gradient

    Returns:
        Dictionary mapping parameter name to gradient array
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, Tensor] = {}
    result: Dict = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_rule is None:
                key = _param_key(node)
                result[key] = result[key] + g if key in result else g
                continue
            for parent, pg in zip(node.parents, node.backward_rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if params is not None:
        for p in params:
            key = _param_key(p)
            if key not in result:
                result[key] = np.zeros_like(p.value)
    return result


# ---------------------------------------------------------------- gradient oracle

@dataclass
class GradReport:
    """Outcome of finite_diff_check."""

    errors: Dict[str, float] = field(default_factory=dict)
    worst_index: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    step: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_parameter(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


# Gradients smaller than this are compared in absolute terms.
REL_ERROR_FLOOR = 1e-8


def finite_diff_check(f: Callable[[Dict[str, Parameter]], Node], params: Dict[str, Tensor],
                      h: float = 1e-4) -> GradReport:
    """
    Compare backward() against central differences for every coordinate.

    Args:
        f: builds a scalar loss Node from a name -> Parameter mapping
        params: float64 starting values by name
        h: finite-difference step

    Returns:
        GradReport with the max relative error per parameter
    """
    leaves = {}
    for name, value in params.items():
        value = np.asarray(value)
        if value.dtype != np.float64:
            raise ContractError(f"finite_diff_check needs float64 parameters, '{name}' is {value.dtype}")
        leaves[name] = Parameter(value.copy(), name)

    analytic = backward(f(leaves), leaves.values())
    report = GradReport(step=h)
    for name, leaf in leaves.items():
        worst, worst_idx = 0.0, ()
        flat = leaf.value.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            plus = float(f(leaves).value)
            flat[i] = saved - h
            minus = float(f(leaves).value)
            flat[i] = saved
            numeric = (plus - minus) / (2 * h)
            a = float(grad[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            if err > worst:
                worst, worst_idx = err, np.unravel_index(i, leaf.shape)
        report.errors[name] = worst
        report.worst_index[name] = tuple(int(j) for j in worst_idx)
        logger.debug(f"finite_diff_check {name}: max rel err {worst:.3e} at {report.worst_index[name]}")
    return report
