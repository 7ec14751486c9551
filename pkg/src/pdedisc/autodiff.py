"""Reverse-mode automatic differentiation on a replayable tape.

The tape records a static computation graph once; `forward()` re-evaluates
it for the current leaf values and `backward()` runs one reverse sweep from
a scalar root, returning gradients for every parameter slot.  Node values
are float64 numpy arrays of arbitrary shape (0-d scalars included), with
numpy broadcasting semantics, so the same engine serves both the scalar
examples in the tests and vectorized network training.

Truncated-Taylor jets (`Jet`) layer on top: every jet coefficient is itself
a tape node, so high-order input derivatives of a recorded function remain
differentiable with respect to the parameters.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit


class TapeError(ValueError):
    """Contract violation while recording or replaying a tape."""


# op -> expected operand count (None = variadic)
_ARITY = {
    "const": 0,
    "param": 0,
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "neg": 1,
    "square": 1,
    "sqrt": 1,
    "exp": 1,
    "tanh": 1,
    "sigmoid": 1,
    "relu": 1,
    "scale": 1,
    "addc": 1,
    "maxc": 1,
    "matmul": 2,
    "concat": None,
    "sum": 1,
    "mean": 1,
    "mean_axis": 1,
    "slice_cols": 1,
    "reshape": 1,
}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of operations; operands always precede their node."""

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple] = []
        self._aux: list = []
        self._values: list[np.ndarray] = []
        self.param_slots: list[int] = []

    def __len__(self) -> int:
        return len(self._ops)

    # -- leaves ------------------------------------------------------------

    def const(self, value) -> int:
        return self.record("const", [], np.asarray(value, dtype=np.float64))

    def param(self, value) -> int:
        ref = self.record("param", [], np.asarray(value, dtype=np.float64))
        self.param_slots.append(ref)
        return ref

    def value(self, ref: int) -> np.ndarray:
        return self._values[ref]

    def set_value(self, ref: int, value) -> None:
        """Overwrite a leaf value in place (used for replay with new data)."""
        if self._ops[ref] not in ("const", "param"):
            raise TapeError(f"node {ref} is not a leaf")
        self._values[ref] = np.asarray(value, dtype=np.float64)

    # -- recording ---------------------------------------------------------

    def record(self, op: str, operands, aux=None) -> int:
        if op not in _ARITY:
            raise TapeError(f"unknown op kind {op!r}")
        operands = tuple(operands)
        want = _ARITY[op]
        if want is not None and len(operands) != want:
            raise TapeError(f"{op} expects {want} operands, got {len(operands)}")
        n = len(self._ops)
        for i in operands:
            if not (0 <= i < n):
                raise TapeError(f"operand {i} not on tape (size {n})")
        self._ops.append(op)
        self._args.append(operands)
        self._aux.append(aux)
        if op in ("const", "param"):
            self._values.append(aux)
            self._aux[-1] = None
        else:
            self._values.append(self._eval(n))
        return n

    # sugar -----------------------------------------------------------------

    def add(self, a, b):
        return self.record("add", [a, b])

    def sub(self, a, b):
        return self.record("sub", [a, b])

    def mul(self, a, b):
        return self.record("mul", [a, b])

    def div(self, a, b):
        return self.record("div", [a, b])

    def neg(self, a):
        return self.record("neg", [a])

    def square(self, a):
        return self.record("square", [a])

    def sqrt(self, a):
        return self.record("sqrt", [a])

    def exp(self, a):
        return self.record("exp", [a])

    def tanh(self, a):
        return self.record("tanh", [a])

    def sigmoid(self, a):
        return self.record("sigmoid", [a])

    def relu(self, a):
        return self.record("relu", [a])

    def scale(self, a, c: float):
        return self.record("scale", [a], float(c))

    def addc(self, a, c: float):
        return self.record("addc", [a], float(c))

    def maxc(self, a, c: float):
        return self.record("maxc", [a], float(c))

    def matmul(self, a, b):
        return self.record("matmul", [a, b])

    def concat(self, refs):
        return self.record("concat", list(refs))

    def sum(self, a):
        return self.record("sum", [a])

    def mean(self, a):
        return self.record("mean", [a])

    def mean_axis(self, a, axis: int, keepdims: bool = True):
        return self.record("mean_axis", [a], (axis, keepdims))

    def slice_cols(self, a, j0: int, j1: int):
        return self.record("slice_cols", [a], (j0, j1))

    def reshape(self, a, shape):
        return self.record("reshape", [a], tuple(shape))

    # -- evaluation ----------------------------------------------------------

    def _eval(self, i: int) -> np.ndarray:
        op = self._ops[i]
        args = self._args[i]
        aux = self._aux[i]
        v = self._values
        if op == "add":
            return v[args[0]] + v[args[1]]
        if op == "sub":
            return v[args[0]] - v[args[1]]
        if op == "mul":
            return v[args[0]] * v[args[1]]
        if op == "div":
            return v[args[0]] / v[args[1]]
        if op == "neg":
            return -v[args[0]]
        if op == "square":
            return v[args[0]] * v[args[0]]
        if op == "sqrt":
            return np.sqrt(v[args[0]])
        if op == "exp":
            return np.exp(v[args[0]])
        if op == "tanh":
            return np.tanh(v[args[0]])
        if op == "sigmoid":
            return expit(v[args[0]])
        if op == "relu":
            return np.maximum(v[args[0]], 0.0)
        if op == "scale":
            return v[args[0]] * aux
        if op == "addc":
            return v[args[0]] + aux
        if op == "maxc":
            return np.maximum(v[args[0]], aux)
        if op == "matmul":
            return v[args[0]] @ v[args[1]]
        if op == "concat":
            return np.concatenate([np.atleast_2d(v[a]) for a in args], axis=1)
        if op == "sum":
            return np.asarray(v[args[0]].sum())
        if op == "mean":
            return np.asarray(v[args[0]].mean())
        if op == "mean_axis":
            axis, keepdims = aux
            return v[args[0]].mean(axis=axis, keepdims=keepdims)
        if op == "slice_cols":
            j0, j1 = aux
            return v[args[0]][:, j0:j1]
        if op == "reshape":
            return v[args[0]].reshape(aux)
        raise TapeError(f"unhandled op {op}")  # pragma: no cover

    def forward(self) -> None:
        """Re-evaluate every non-leaf node in recording order."""
        for i, op in enumerate(self._ops):
            if op not in ("const", "param"):
                self._values[i] = self._eval(i)

    # -- reverse sweep ---------------------------------------------------------

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Gradient of the scalar at `root` w.r.t. every parameter slot."""
        if not (0 <= root < len(self._ops)):
            raise TapeError(f"root {root} not on tape")
        v = self._values
        if v[root].size != 1:
            raise TapeError("backward root must be scalar")
        adj: list = [None] * (root + 1)
        adj[root] = np.ones_like(v[root])
        for i in range(root, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = self._ops[i]
            if op in ("const", "param"):
                continue
            args = self._args[i]
            aux = self._aux[i]

            def acc(j, contrib):
                contrib = _unbroadcast(np.asarray(contrib), v[j].shape)
                adj[j] = contrib if adj[j] is None else adj[j] + contrib

            if op == "add":
                acc(args[0], g)
                acc(args[1], g)
            elif op == "sub":
                acc(args[0], g)
                acc(args[1], -g)
            elif op == "mul":
                acc(args[0], g * v[args[1]])
                acc(args[1], g * v[args[0]])
            elif op == "div":
                acc(args[0], g / v[args[1]])
                acc(args[1], -g * v[i] / v[args[1]])
            elif op == "neg":
                acc(args[0], -g)
            elif op == "square":
                acc(args[0], 2.0 * g * v[args[0]])
            elif op == "sqrt":
                acc(args[0], 0.5 * g / v[i])
            elif op == "exp":
                acc(args[0], g * v[i])
            elif op == "tanh":
                acc(args[0], g * (1.0 - v[i] * v[i]))
            elif op == "sigmoid":
                acc(args[0], g * v[i] * (1.0 - v[i]))
            elif op == "relu":
                acc(args[0], g * (v[args[0]] > 0.0))
            elif op == "scale":
                acc(args[0], g * aux)
            elif op == "addc":
                acc(args[0], g)
            elif op == "maxc":
                acc(args[0], g * (v[args[0]] > aux))
            elif op == "matmul":
                acc(args[0], g @ v[args[1]].T)
                acc(args[1], v[args[0]].T @ g)
            elif op == "concat":
                col = 0
                for a in args:
                    w = np.atleast_2d(v[a]).shape[1]
                    acc(a, g[:, col:col + w].reshape(np.atleast_2d(v[a]).shape))
                    col += w
            elif op == "sum":
                acc(args[0], np.broadcast_to(g, v[args[0]].shape))
            elif op == "mean":
                acc(args[0], np.broadcast_to(g / v[args[0]].size, v[args[0]].shape))
            elif op == "mean_axis":
                axis, keepdims = aux
                gg = g if keepdims else np.expand_dims(g, axis)
                n = v[args[0]].shape[axis]
                acc(args[0], np.broadcast_to(gg / n, v[args[0]].shape))
            elif op == "slice_cols":
                j0, j1 = aux
                full = np.zeros_like(v[args[0]])
                full[:, j0:j1] = g
                acc(args[0], full)
            elif op == "reshape":
                acc(args[0], g.reshape(v[args[0]].shape))
            else:  # pragma: no cover
                raise TapeError(f"unhandled op {op}")
        return {s: (adj[s] if s <= root and adj[s] is not None
                    else np.zeros_like(v[s]))
                for s in self.param_slots}


# ---------------------------------------------------------------------------
# Truncated-Taylor jets
# ---------------------------------------------------------------------------


class Jet:
    """Truncated Taylor series whose coefficients live on a tape.

    coefficients[m] holds f^(m)(x0)/m! as a tape node, so arithmetic on
    jets is recorded and `Tape.backward` differentiates through it.
    """

    __slots__ = ("tape", "coeffs")

    def __init__(self, tape: Tape, coeffs):
        self.tape = tape
        self.coeffs = list(coeffs)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def coefficient(self, m: int) -> int:
        return self.coeffs[m]

    def derivative(self, m: int) -> int:
        """Tape node holding the m-th derivative: m! * c_m."""
        return self.tape.scale(self.coeffs[m], math.factorial(m))


def jet_variable(tape: Tape, ref: int, degree: int, zeros_like=None) -> Jet:
    """Seed jet for the expansion variable: [x0, 1, 0, ..., 0]."""
    shape = tape.value(ref).shape
    coeffs = [ref]
    if degree >= 1:
        coeffs.append(tape.const(np.ones(shape)))
        if degree >= 2:
            zero = tape.const(np.zeros(shape))
            coeffs.extend([zero] * (degree - 1))
    return Jet(tape, coeffs)


def jet_constant(tape: Tape, ref: int, degree: int) -> Jet:
    """Jet of a quantity that does not vary with the expansion variable."""
    shape = tape.value(ref).shape
    zero = tape.const(np.zeros(shape))
    return Jet(tape, [ref] + [zero] * degree)


def _check_degrees(a: Jet, b: Jet) -> None:
    if a.degree != b.degree:
        raise TapeError(f"jet degree mismatch: {a.degree} vs {b.degree}")


def jet_add(a: Jet, b: Jet) -> Jet:
    _check_degrees(a, b)
    t = a.tape
    return Jet(t, [t.add(x, y) for x, y in zip(a.coeffs, b.coeffs)])


def jet_sub(a: Jet, b: Jet) -> Jet:
    _check_degrees(a, b)
    t = a.tape
    return Jet(t, [t.sub(x, y) for x, y in zip(a.coeffs, b.coeffs)])


def jet_scale(a: Jet, c: float) -> Jet:
    t = a.tape
    return Jet(t, [t.scale(x, c) for x in a.coeffs])


def jet_mul(a: Jet, b: Jet) -> Jet:
    """Cauchy product truncated at the common degree."""
    _check_degrees(a, b)
    t = a.tape
    out = []
    for m in range(a.degree + 1):
        acc = None
        for i in range(m + 1):
            term = t.mul(a.coeffs[i], b.coeffs[m - i])
            acc = term if acc is None else t.add(acc, term)
        out.append(acc)
    return Jet(t, out)


def _jet_chain(a: Jet, g0: int, prime_coeffs) -> list[int]:
    """Solve m*g_m = sum_{k=1..m} k*a_k*P_{m-k} for g, given P = g' o a rule.

    `prime_coeffs(g_list, m)` must return the node for P_m using g_0..g_m.
    """
    t = a.tape
    K = a.degree
    g = [g0]
    P = [prime_coeffs(g, 0)]
    for m in range(1, K + 1):
        acc = None
        for k in range(1, m + 1):
            term = t.scale(t.mul(a.coeffs[k], P[m - k]), float(k))
            acc = term if acc is None else t.add(acc, term)
        g.append(t.scale(acc, 1.0 / m))
        if m < K:
            P.append(prime_coeffs(g, m))
    return g


def jet_tanh(a: Jet) -> Jet:
    """tanh applied to a jet via the recurrence from g' = 1 - g^2."""
    t = a.tape
    g0 = t.tanh(a.coeffs[0])

    def P(g, m):
        # P_m = coefficient m of (1 - g^2)
        if m == 0:
            return t.sub(t.const(np.ones_like(t.value(g0))), t.square(g[0]))
        acc = None
        for i in range(m + 1):
            term = t.mul(g[i], g[m - i])
            acc = term if acc is None else t.add(acc, term)
        return t.neg(acc)

    return Jet(t, _jet_chain(a, g0, P))


def jet_sigmoid(a: Jet) -> Jet:
    """Logistic sigmoid on a jet via s' = s(1 - s)."""
    t = a.tape
    s0 = t.sigmoid(a.coeffs[0])

    def P(s, m):
        # P_m = coefficient m of s - s^2
        acc = None
        for i in range(m + 1):
            term = t.mul(s[i], s[m - i])
            acc = term if acc is None else t.add(acc, term)
        return t.sub(s[m], acc)

    return Jet(t, _jet_chain(a, s0, P))


def jet_exp(a: Jet) -> Jet:
    """exp on a jet via e' = e."""
    t = a.tape
    e0 = t.exp(a.coeffs[0])
    return Jet(t, _jet_chain(a, e0, lambda e, m: e[m]))
