"""Minimal reverse-mode differentiation over a fixed vocabulary of vector primitives.

A *program* is any Python callable mapping one input to a scalar using the
primitives below. Primitives accept plain arrays or :class:`Var` nodes; they only
record onto the tape when at least one argument is a ``Var``, so the same
program can be evaluated cheaply (for finite differences) or traced (for
gradients). Every primitive checks its output for non-finite values and raises
:class:`EvaluationError` naming itself.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

from procreate_lab import diffusion
from procreate_lab.errors import DegenerateSimilarityWarning, EvaluationError, ParameterError

COSINE_FLOOR = 1e-12


class Var:
    """A node on the tape: a value plus (parent, vector-Jacobian product) pairs."""

    __slots__ = ("value", "parents", "op", "meta")

    def __init__(self, value, parents=(), op: str = "input", meta=None):
        self.value = value
        self.parents = parents
        self.op = op
        self.meta = meta

    def __repr__(self):
        return f"Var(op={self.op!r}, value={self.value!r})"


Program = Callable[[object], object]


def _val(a):
    return a.value if isinstance(a, Var) else a


def _finite(op: str, value):
    if not np.all(np.isfinite(value)):
        raise EvaluationError(op)
    return value


def _record(op: str, value, inputs, vjps, meta=None):
    """Wrap ``value`` in a Var if any input is traced; otherwise return it as is."""
    _finite(op, value)
    parents = tuple((a, f) for a, f in zip(inputs, vjps) if isinstance(a, Var))
    if not parents:
        return value
    return Var(value, parents, op, meta)


# -- primitives ---------------------------------------------------------------

def add(a, b):
    return _record("add", _val(a) + _val(b), (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    return _record("sub", _val(a) - _val(b), (a, b), (lambda g: g, lambda g: -g))


def scale(a, c: float):
    """Multiply by a constant scalar."""
    return _record("scale", c * _val(a), (a,), (lambda g: c * g,))


def affine(a, A=None, b=None):
    """``A @ a + b`` with constant ``A`` (matrix or None for identity) and ``b``."""
    av = _val(a)
    out = av if A is None else A @ av
    if b is not None:
        out = out + b
    vjp = (lambda g: g) if A is None else (lambda g: A.T @ g)
    return _record("affine", out, (a,), (vjp,))


def matvec(P, a):
    return _record("matvec", P @ _val(a), (a,), (lambda g: P.T @ g,))


def tanh(a):
    y = np.tanh(_val(a))
    return _record("tanh", y, (a,), (lambda g: g * (1.0 - y * y),))


def elementwise_cos(a):
    av = _val(a)
    return _record("elementwise_cos", np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def dot(a, b):
    av, bv = _val(a), _val(b)
    return _record("dot", float(av @ bv), (a, b), (lambda g: g * bv, lambda g: g * av))


def sum_squares(a):
    av = _val(a)
    return _record("sum_squares", float(av @ av), (a,), (lambda g: 2.0 * g * av,))


def norm(a):
    av = _val(a)
    n = float(np.sqrt(av @ av))
    if n == 0.0:
        raise EvaluationError("norm", "gradient undefined at zero vector")
    return _record("norm", n, (a,), (lambda g: g * av / n,))


def cosine(a, b):
    """Cosine similarity; degenerate (near-zero norm) inputs give 0 with a warning."""
    av, bv = _val(a), _val(b)
    na, nb = float(np.sqrt(av @ av)), float(np.sqrt(bv @ bv))
    denom = na * nb
    if denom < COSINE_FLOOR:
        warnings.warn("cosine similarity of a zero vector", DegenerateSimilarityWarning, stacklevel=2)
        zero = lambda g: np.zeros_like(av, dtype=float)  # noqa: E731
        return _record("cosine", 0.0, (a, b), (zero, lambda g: np.zeros_like(bv, dtype=float)),
                       meta={"degenerate": True})
    c = float(av @ bv) / denom
    return _record(
        "cosine", c, (a, b),
        (lambda g: g * (bv / denom - c * av / (na * na)),
         lambda g: g * (av / denom - c * bv / (nb * nb))),
    )


def cosine_rows(a, R: np.ndarray):
    """Cosine similarity of ``a`` against every row of a constant matrix ``R``."""
    av = _val(a)
    na = float(np.sqrt(av @ av))
    row_norms = np.sqrt(np.einsum("ij,ij->i", R, R))
    denom = na * row_norms
    degenerate = denom < COSINE_FLOOR
    if np.any(degenerate):
        warnings.warn("cosine similarity of a zero vector", DegenerateSimilarityWarning, stacklevel=2)
    safe = np.where(degenerate, 1.0, denom)
    c = np.where(degenerate, 0.0, (R @ av) / safe)

    def vjp(g):
        if na < COSINE_FLOOR:
            return np.zeros_like(av, dtype=float)
        w = np.where(degenerate, 0.0, g)
        return (w / safe) @ R - float(w @ c) * av / (na * na)

    return _record("cosine_rows", c, (a,), (vjp,), meta={"degenerate": bool(np.any(degenerate))})


def max_(v):
    """Maximum entry; the derivative flows to the lowest-index maximiser."""
    vv = np.asarray(_val(v))
    idx = int(np.argmax(vv))

    def vjp(g):
        out = np.zeros_like(vv, dtype=float)
        out[idx] = g
        return out

    return _record("max", float(vv[idx]), (v,), (vjp,), meta={"argmax": idx})


def argmax_of(node) -> int:
    """Index selected by a ``max_`` node (works on traced and untraced results alike)."""
    if isinstance(node, Var):
        while node.op != "max":
            if not node.parents:
                raise ParameterError("no max node on this path")
            node = node.parents[0][0]
        return node.meta["argmax"]
    raise ParameterError("argmax is only recorded on traced values")


def mixture_eps(a, t: int, schedule, mixture):
    """Exact mixture noise prediction as a differentiable primitive.

    The Jacobian is ``-sqrt(1 - alpha) * H`` with ``H`` the (symmetric) Hessian of
    ``log q_t``: ``H = -sum_k r_k / v_k I + sum_k r_k s_k s_k^T - sbar sbar^T``.
    """
    av = _val(a)
    eps = diffusion.epsilon_gmm(av, t, schedule, mixture)
    if not isinstance(a, Var):
        return _finite("mixture_eps", eps)
    alpha = schedule.alpha(t)
    log_resp, s, var = diffusion.mixture_score_terms(av, alpha, mixture)
    r = np.exp(log_resp)
    sbar = r @ s
    c = np.sqrt(1.0 - alpha)
    diag = float(r @ (1.0 / var))

    def vjp(g):
        hg = -diag * g + (r * (s @ g)) @ s - float(sbar @ g) * sbar
        return -c * hg

    return _record("mixture_eps", eps, (a,), (vjp,))


def predict_x0(a, eps, t: int, schedule):
    """One-step clean prediction; linear in both arguments."""
    alpha = schedule.alpha(t)
    out = diffusion.predict_x0_one_step(_val(a), _val(eps), t, schedule)
    ia = 1.0 / np.sqrt(alpha)
    ie = -np.sqrt(1.0 - alpha) / np.sqrt(alpha)
    return _record("predict_x0", out, (a, eps), (lambda g: ia * g, lambda g: ie * g))


def ddim(a, eps, t: int, t_next: int, schedule):
    """Deterministic DDIM transition; linear in both arguments."""
    out = diffusion.ddim_step(_val(a), _val(eps), t, t_next, schedule)
    alpha, alpha_next = schedule.alpha(t), schedule.alpha(t_next)
    ia = np.sqrt(alpha_next) / np.sqrt(alpha)
    ie = np.sqrt(1.0 - alpha_next) - np.sqrt(alpha_next) * np.sqrt(1.0 - alpha) / np.sqrt(alpha)
    return _record("ddim", out, (a, eps), (lambda g: ia * g, lambda g: ie * g))


# -- evaluation ---------------------------------------------------------------

def evaluate(program: Program, x) -> float:
    out = program(np.asarray(x, dtype=np.float64))
    return float(_val(out))


def trace(program: Program, x):
    """Run ``program`` on a fresh input node; returns ``(input_var, output)``."""
    root = Var(np.asarray(x, dtype=np.float64))
    return root, program(root)


def backward(root: Var, out) -> np.ndarray:
    """Gradient of scalar ``out`` with respect to ``root`` by reverse accumulation."""
    if not isinstance(out, Var):
        # output does not depend on the input
        return np.zeros_like(root.value)
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(out): 1.0}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            grads[key] = contrib if key not in grads else grads[key] + contrib
        if node is root:
            grads[id(root)] = g
    g = grads.get(id(root))
    if g is None:
        return np.zeros_like(root.value)
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise EvaluationError("backward")
    return g


def value_and_gradient(program: Program, x):
    root, out = trace(program, x)
    return float(_val(out)), backward(root, out)


def gradient(program: Program, x) -> np.ndarray:
    """Exact gradient of ``program`` at ``x``."""
    return value_and_gradient(program, x)[1]


def finite_diff(program: Program, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not h > 0:
        raise ParameterError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (evaluate(program, x + e) - evaluate(program, x - e)) / (2.0 * h)
    return g


__all__: Sequence[str] = (
    "Var", "add", "sub", "scale", "affine", "matvec", "tanh", "elementwise_cos", "dot", "sum_squares", "norm",
    "cosine", "cosine_rows", "max_", "argmax_of", "mixture_eps", "predict_x0", "ddim",
    "evaluate", "trace", "backward", "value_and_gradient", "gradient", "finite_diff",
)
