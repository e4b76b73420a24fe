"""Expression-graph differentiation engine with second-order support.

Graphs are immutable DAGs over 2-D arrays. `gradient` is a source
transformation: it returns a new graph built only from the same node kinds,
so gradients can be differentiated again. That closure property is what
lets anchor construction differentiate through an inner parameter gradient.

Supported node kinds: constant, variable, matmul (with transpose flags),
add, sub, hadamard, scalar-mul, activation (tanh, smooth-gelu), sum,
frobenius-norm, vector-norm (variadic), inner-product, safe-divide.

safe-divide floors denominator magnitudes at 1e-30 so degenerate inputs
yield finite values instead of NaN; callers are expected to catch true
zero-norm situations at a higher level.
"""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    NotScalarError,
    NumericalError,
    ShapeMismatchError,
    UnboundVariableError,
)

SAFE_DIV_FLOOR = 1e-30
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_OP_CONST = 0
_OP_VAR = 1
_OP_MATMUL = 2
_OP_ADD = 3
_OP_SUB = 4
_OP_HADAMARD = 5
_OP_SCALAR_MUL = 6
_OP_TANH = 7
_OP_GELU = 8
_OP_SUM = 9
_OP_FROB = 10
_OP_VNORM = 11
_OP_INNER = 12
_OP_SDIV = 13
_OP_SDIV_SCALAR = 14


class Expr:
    """Immutable graph node. Build through the module-level constructors."""

    __slots__ = ("kind", "children", "shape", "value", "name", "trans_a", "trans_b", "act")

    def __init__(self, kind, children=(), shape=None, value=None, name=None,
                 trans_a=False, trans_b=False, act=None):
        self.kind = kind
        self.children = tuple(children)
        self.shape = shape
        self.value = value
        self.name = name
        self.trans_a = trans_a
        self.trans_b = trans_b
        self.act = act

    def __repr__(self):
        tag = self.name if self.kind == "variable" else self.kind
        return f"Expr({tag}, shape={self.shape})"


def constant(value) -> Expr:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    if v.ndim != 2:
        raise ShapeMismatchError(f"constant: expected 2-D, got shape {v.shape}")
    return Expr("constant", shape=v.shape, value=v)


def variable(name: str, rows: int, cols: int) -> Expr:
    if rows < 1 or cols < 1:
        raise ShapeMismatchError(f"variable {name}: bad shape ({rows}, {cols})")
    return Expr("variable", shape=(rows, cols), name=name)


def _eff_shape(shape, trans):
    return (shape[1], shape[0]) if trans else shape


def matmul(a: Expr, b: Expr, trans_a: bool = False, trans_b: bool = False) -> Expr:
    sa = _eff_shape(a.shape, trans_a)
    sb = _eff_shape(b.shape, trans_b)
    if sa[1] != sb[0]:
        raise ShapeMismatchError(f"matmul: {sa} @ {sb}")
    return Expr("matmul", (a, b), shape=(sa[0], sb[1]), trans_a=trans_a, trans_b=trans_b)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}")


def add(a: Expr, b: Expr) -> Expr:
    _same_shape("add", a, b)
    return Expr("add", (a, b), shape=a.shape)


def sub(a: Expr, b: Expr) -> Expr:
    _same_shape("sub", a, b)
    return Expr("sub", (a, b), shape=a.shape)


def hadamard(a: Expr, b: Expr) -> Expr:
    _same_shape("hadamard", a, b)
    return Expr("hadamard", (a, b), shape=a.shape)


def scalar_mul(s: Expr, a: Expr) -> Expr:
    if s.shape != (1, 1):
        raise ShapeMismatchError(f"scalar-mul: scale has shape {s.shape}")
    return Expr("scalar-mul", (s, a), shape=a.shape)


def smul(c: float, a: Expr) -> Expr:
    """scalar_mul with a compile-time float scale."""
    return scalar_mul(constant([[float(c)]]), a)


def tanh(a: Expr) -> Expr:
    return Expr("activation", (a,), shape=a.shape, act="tanh")


def smooth_gelu(a: Expr) -> Expr:
    return Expr("activation", (a,), shape=a.shape, act="smooth-gelu")


def sum_entries(a: Expr) -> Expr:
    return Expr("sum", (a,), shape=(1, 1))


def frobenius_norm(a: Expr) -> Expr:
    return Expr("frobenius-norm", (a,), shape=(1, 1))


def vector_norm(*parts: Expr) -> Expr:
    """2-norm of the concatenation of the flattened parts."""
    if not parts:
        raise ShapeMismatchError("vector-norm: needs at least one operand")
    return Expr("vector-norm", parts, shape=(1, 1))


def inner_product(a: Expr, b: Expr) -> Expr:
    _same_shape("inner-product", a, b)
    return Expr("inner-product", (a, b), shape=(1, 1))


def safe_divide(a: Expr, b: Expr) -> Expr:
    """Elementwise a / b; b may also be 1x1 and broadcasts over a."""
    if b.shape != a.shape and b.shape != (1, 1):
        raise ShapeMismatchError(f"safe-divide: {a.shape} / {b.shape}")
    return Expr("safe-divide", (a, b), shape=a.shape)


def _topo(roots: Iterable[Expr]) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for c in node.children:
            if id(c) not in seen:
                stack.append((c, False))
    return order


def node_kinds(e: Expr) -> set[str]:
    """Set of node kinds reachable from e (for the closure property)."""
    return {n.kind for n in _topo([e])}


def _floor_denominator(d: np.ndarray) -> np.ndarray:
    small = np.abs(d) < SAFE_DIV_FLOOR
    if not small.any():
        return d
    return np.where(small, np.where(d < 0.0, -SAFE_DIV_FLOOR, SAFE_DIV_FLOOR), d)


class CompiledGraph:
    """Topologically ordered program evaluating one or more roots.

    Compile once, then `run` with different bindings; evaluation order is
    fixed, so identical bindings give bit-identical outputs.
    """

    def __init__(self, roots: Sequence[Expr]):
        order = _topo(roots)
        slot_of = {id(n): i for i, n in enumerate(order)}
        self._n = len(order)
        self._init_values: list = [None] * self._n
        self._var_shapes: dict[str, tuple] = {}
        steps = []
        for i, n in enumerate(order):
            k = n.kind
            if k == "constant":
                self._init_values[i] = n.value
            elif k == "variable":
                known = self._var_shapes.get(n.name)
                if known is not None and known != n.shape:
                    raise ShapeMismatchError(
                        f"variable {n.name} used with shapes {known} and {n.shape}")
                self._var_shapes[n.name] = n.shape
                steps.append((_OP_VAR, i, n.name, n.shape))
            elif k == "matmul":
                steps.append((_OP_MATMUL, i, slot_of[id(n.children[0])],
                              slot_of[id(n.children[1])], n.trans_a, n.trans_b))
            elif k == "add":
                steps.append((_OP_ADD, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            elif k == "sub":
                steps.append((_OP_SUB, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            elif k == "hadamard":
                steps.append((_OP_HADAMARD, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            elif k == "scalar-mul":
                steps.append((_OP_SCALAR_MUL, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            elif k == "activation":
                op = _OP_TANH if n.act == "tanh" else _OP_GELU
                steps.append((op, i, slot_of[id(n.children[0])]))
            elif k == "sum":
                steps.append((_OP_SUM, i, slot_of[id(n.children[0])]))
            elif k == "frobenius-norm":
                steps.append((_OP_FROB, i, slot_of[id(n.children[0])]))
            elif k == "vector-norm":
                steps.append((_OP_VNORM, i, tuple(slot_of[id(c)] for c in n.children)))
            elif k == "inner-product":
                steps.append((_OP_INNER, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            elif k == "safe-divide":
                op = _OP_SDIV_SCALAR if (n.children[1].shape == (1, 1) and n.shape != (1, 1)) else _OP_SDIV
                steps.append((op, i, slot_of[id(n.children[0])], slot_of[id(n.children[1])]))
            else:
                raise NumericalError(f"unknown node kind {k}")
        self._steps = steps
        self._root_slots = [slot_of[id(r)] for r in roots]

    def run(self, binding: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        v = list(self._init_values)
        for step in self._steps:
            op = step[0]
            if op == _OP_MATMUL:
                _, i, ia, ib, ta, tb = step
                a = v[ia].T if ta else v[ia]
                b = v[ib].T if tb else v[ib]
                v[i] = a @ b
            elif op == _OP_ADD:
                v[step[1]] = v[step[2]] + v[step[3]]
            elif op == _OP_HADAMARD:
                v[step[1]] = v[step[2]] * v[step[3]]
            elif op == _OP_SCALAR_MUL:
                v[step[1]] = v[step[2]][0, 0] * v[step[3]]
            elif op == _OP_SUB:
                v[step[1]] = v[step[2]] - v[step[3]]
            elif op == _OP_VAR:
                _, i, name, shape = step
                try:
                    val = binding[name]
                except KeyError:
                    raise UnboundVariableError(f"variable {name} is not bound") from None
                if val.shape != shape:
                    raise ShapeMismatchError(
                        f"variable {name}: bound {val.shape}, declared {shape}")
                v[i] = val
            elif op == _OP_TANH:
                v[step[1]] = np.tanh(v[step[2]])
            elif op == _OP_GELU:
                x = v[step[2]]
                v[step[1]] = 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))
            elif op == _OP_SUM:
                v[step[1]] = np.array([[v[step[2]].sum()]])
            elif op == _OP_FROB:
                v[step[1]] = np.array([[np.sqrt((v[step[2]] ** 2).sum())]])
            elif op == _OP_VNORM:
                ssq = 0.0
                for s in step[2]:
                    x = v[s]
                    ssq += (x * x).sum()
                v[step[1]] = np.array([[np.sqrt(ssq)]])
            elif op == _OP_INNER:
                v[step[1]] = np.array([[np.vdot(v[step[2]], v[step[3]])]])
            elif op == _OP_SDIV:
                v[step[1]] = v[step[2]] / _floor_denominator(v[step[3]])
            elif op == _OP_SDIV_SCALAR:
                v[step[1]] = v[step[2]] / _floor_denominator(v[step[3]])[0, 0]
            else:  # constant slots are prefilled
                raise NumericalError(f"bad opcode {op}")
        out = [v[s] for s in self._root_slots]
        for arr in out:
            if not np.all(np.isfinite(arr)):
                raise NumericalError("evaluation produced non-finite values")
        return out

    @property
    def variable_shapes(self) -> dict[str, tuple]:
        return dict(self._var_shapes)


def evaluate(e: Expr, binding: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Evaluate a single expression under a binding."""
    return CompiledGraph([e]).run(binding or {})[0]


def _neg(x: Expr) -> Expr:
    return smul(-1.0, x)


def _accumulate(adj: dict, node: Expr, contribution: Expr) -> None:
    prev = adj.get(id(node))
    adj[id(node)] = contribution if prev is None else add(prev, contribution)


def _backprop(scalar: Expr) -> dict[int, Expr]:
    """Adjoint expressions for every node reachable from a 1x1 scalar."""
    if scalar.shape != (1, 1):
        raise NotScalarError(f"gradient target has shape {scalar.shape}")
    order = _topo([scalar])
    adj: dict[int, Expr] = {id(scalar): constant([[1.0]])}
    for n in reversed(order):
        g = adj.get(id(n))
        if g is None:
            continue
        k = n.kind
        if k in ("constant", "variable"):
            continue
        if k == "matmul":
            a, b = n.children
            ta, tb = n.trans_a, n.trans_b
            if ta:
                _accumulate(adj, a, matmul(b, g, trans_a=tb, trans_b=True))
            else:
                _accumulate(adj, a, matmul(g, b, trans_b=not tb))
            if tb:
                _accumulate(adj, b, matmul(g, a, trans_a=True, trans_b=ta))
            else:
                _accumulate(adj, b, matmul(a, g, trans_a=not ta))
        elif k == "add":
            _accumulate(adj, n.children[0], g)
            _accumulate(adj, n.children[1], g)
        elif k == "sub":
            _accumulate(adj, n.children[0], g)
            _accumulate(adj, n.children[1], _neg(g))
        elif k == "hadamard":
            a, b = n.children
            _accumulate(adj, a, hadamard(b, g))
            _accumulate(adj, b, hadamard(a, g))
        elif k == "scalar-mul":
            s, a = n.children
            _accumulate(adj, s, inner_product(a, g))
            _accumulate(adj, a, scalar_mul(s, g))
        elif k == "activation":
            (x,) = n.children
            ones = constant(np.ones(x.shape))
            if n.act == "tanh":
                deriv = sub(ones, hadamard(n, n))
            else:  # smooth-gelu
                x2 = hadamard(x, x)
                u = add(smul(GELU_C, x), smul(GELU_C * GELU_A, hadamard(x2, x)))
                t = tanh(u)
                term1 = smul(0.5, add(ones, t))
                inner_poly = add(smul(GELU_C, ones), smul(3.0 * GELU_A * GELU_C, x2))
                term2 = smul(0.5, hadamard(hadamard(x, sub(ones, hadamard(t, t))), inner_poly))
                deriv = add(term1, term2)
            _accumulate(adj, x, hadamard(g, deriv))
        elif k == "sum":
            (a,) = n.children
            _accumulate(adj, a, scalar_mul(g, constant(np.ones(a.shape))))
        elif k in ("frobenius-norm", "vector-norm"):
            coeff = safe_divide(g, n)
            for c in n.children:
                _accumulate(adj, c, scalar_mul(coeff, c))
        elif k == "inner-product":
            a, b = n.children
            _accumulate(adj, a, scalar_mul(g, b))
            _accumulate(adj, b, scalar_mul(g, a))
        elif k == "safe-divide":
            a, b = n.children
            _accumulate(adj, a, safe_divide(g, b))
            if b.shape == a.shape:
                _accumulate(adj, b, _neg(hadamard(g, safe_divide(n, b))))
            else:  # 1x1 denominator broadcast over a
                _accumulate(adj, b, _neg(safe_divide(safe_divide(inner_product(g, a), b), b)))
        else:
            raise NumericalError(f"unknown node kind {k}")
    return adj


def gradients(scalar: Expr, wrts: Sequence[Expr]) -> list[Expr]:
    """Gradient expressions for several variables with one reverse pass.

    Variables the scalar does not depend on get an all-zero constant of the
    variable's shape.
    """
    for w in wrts:
        if w.kind != "variable":
            raise NumericalError("gradient target must be a variable node")
    adj = _backprop(scalar)
    # Sum adjoints across all occurrences of each requested variable name.
    by_name: dict[str, Expr] = {}
    for n in _topo([scalar]):
        if n.kind == "variable" and id(n) in adj:
            prev = by_name.get(n.name)
            by_name[n.name] = adj[id(n)] if prev is None else add(prev, adj[id(n)])
    out = []
    for w in wrts:
        got = by_name.get(w.name)
        out.append(got if got is not None else constant(np.zeros(w.shape)))
    return out


def gradient(scalar: Expr, wrt: Expr) -> Expr:
    """Gradient of a 1x1 scalar with respect to one variable.

    The result is built only from supported node kinds, so it can be
    differentiated again. If the variable does not occur in the scalar the
    result is an all-zero constant.
    """
    return gradients(scalar, [wrt])[0]


def check_finite_diff(scalar: Expr, wrt: Expr, binding: Mapping[str, np.ndarray],
                      step: float | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / (|cd| + 1e-8)."""
    graph = CompiledGraph([scalar])
    analytic = evaluate(gradient(scalar, wrt), binding)
    base = np.array(binding[wrt.name], dtype=np.float64)
    h = step if step is not None else 1e-5 * (1.0 + float(np.max(np.abs(base))))
    probe = dict(binding)
    worst = 0.0
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        bumped = base.copy()
        bumped[ix] = base[ix] + h
        probe[wrt.name] = bumped
        f_plus = graph.run(probe)[0][0, 0]
        bumped[ix] = base[ix] - h
        f_minus = graph.run(probe)[0][0, 0]
        cd = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[ix] - cd) / (abs(cd) + 1e-8)
        if err > worst:
            worst = err
    return worst
