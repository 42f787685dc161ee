"""Finite-difference oracle suite over every registered op.

Each case draws random inputs, projects the op output onto a fixed random
tensor to get a scalar, and compares tape gradients with central
differences for every differentiable input in turn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gradcheck import analytic_grad, grad_check
from .tensor import OPS, Tensor, forward_eval

Case = tuple[list[np.ndarray], dict]


def _n(rng, *shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, *shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 2.0, size=shape)


def _binary(rng) -> Case:
    a_shape = [(3, 4), (2, 3, 4), (4,), (3, 1)][rng.integers(4)]
    b_shape = [a_shape, a_shape[-1:], (1,) * len(a_shape), (3, 4)][rng.integers(4)]
    return [_n(rng, *a_shape), _n(rng, *b_shape)], {}


def _div(rng) -> Case:
    (a, b), _ = _binary(rng)
    return [a, _away_from_zero(rng, *b.shape)], {}


def _matmul(rng) -> Case:
    m, k, n = rng.integers(1, 5, size=3)
    kind = rng.integers(3)
    if kind == 0:
        return [_n(rng, m, k), _n(rng, k, n)], {}
    if kind == 1:
        return [_n(rng, 2, m, k), _n(rng, k, n)], {}
    return [_n(rng, 2, m, k), _n(rng, 2, k, n)], {}


def _linear(rng) -> Case:
    m, k, n = rng.integers(1, 5, size=3)
    lead = [(m,), (2, m)][rng.integers(2)]
    return [_n(rng, *lead, k), _n(rng, k, n), _n(rng, n)], {}


def _unary(rng) -> Case:
    return [_n(rng, *[(5,), (3, 4), (2, 3, 2)][rng.integers(3)])], {}


def _exp(rng) -> Case:
    return [rng.uniform(-2, 2, size=(3, 4))], {}


def _log(rng) -> Case:
    return [rng.uniform(0.5, 3.0, size=(3, 4))], {}


def _softmax(rng) -> Case:
    return [2 * _n(rng, 3, 5)], {"axis": int(rng.choice([-1, 0]))}


def _l2n(rng) -> Case:
    return [_n(rng, 2, 3, 5)], {"axis": int(rng.choice([-1, 1]))}


def _layer_norm(rng) -> Case:
    d = int(rng.integers(3, 7))
    return [_n(rng, 3, d), 1 + 0.3 * _n(rng, d), _n(rng, d)], {}


def _reduce(rng) -> Case:
    axis = [None, 0, -1, (0, 2)][rng.integers(4)]
    return [_n(rng, 2, 3, 4)], {"axis": axis, "keepdims": bool(rng.integers(2))}


def _reshape(rng) -> Case:
    return [_n(rng, 2, 6)], {"shape": [(3, 4), (12,), (2, 2, 3)][rng.integers(3)]}


def _transpose(rng) -> Case:
    return [_n(rng, 2, 3, 4)], {"axes": [(2, 0, 1), (1, 0, 2), None][rng.integers(3)]}


def _getitem(rng) -> Case:
    index = [(slice(1, 3), 0), (Ellipsis, 1), (np.array([0, 2, 2]),), (slice(None), slice(None, None, 2))][
        rng.integers(4)
    ]
    return [_n(rng, 3, 4, 2)], {"index": index}


def _take(rng) -> Case:
    axis = int(rng.integers(2))
    return [_n(rng, 4, 5)], {"indices": rng.integers(0, 4, size=6), "axis": axis}


def _scatter(rng) -> Case:
    length = 6
    idx = rng.permutation(length)[:4]
    return [_n(rng, 4, 3)], {"indices": idx, "length": length, "axis": 0}


def _concat(rng) -> Case:
    axis = int(rng.integers(2))
    n = int(rng.integers(2, 4))
    shapes = [(3, int(rng.integers(1, 4))) if axis == 1 else (int(rng.integers(1, 4)), 3) for _ in range(n)]
    return [_n(rng, *s) for s in shapes], {"axis": axis}


def _where(rng) -> Case:
    return [_n(rng, 3, 4), _n(rng, 4)], {"cond": rng.random((3, 4)) < 0.5}


def _cross_entropy(rng) -> Case:
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    return [2 * _n(rng, n, c)], {"labels": rng.integers(0, c, size=n)}


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary,
    "sub": _binary,
    "mul": _binary,
    "div": _div,
    "neg": _unary,
    "matmul": _matmul,
    "linear": _linear,
    "exp": _exp,
    "log": _log,
    "tanh": _unary,
    "gelu": _unary,
    "softmax": _softmax,
    "log_softmax": _softmax,
    "l2_normalize": _l2n,
    "layer_norm": _layer_norm,
    "sum": _reduce,
    "mean": _reduce,
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "take": _take,
    "scatter": _scatter,
    "concat": _concat,
    "where": _where,
    "cross_entropy": _cross_entropy,
    "stop_gradient": _unary,
}


@dataclass
class OpCheck:
    op: str
    instance: int
    arg: int
    error: float


@dataclass
class SuiteReport:
    checks: list[OpCheck] = field(default_factory=list)

    def max_error(self, op: str | None = None) -> float:
        errs = [c.error for c in self.checks if op is None or c.op == op]
        return max(errs) if errs else 0.0

    def failures(self, tol: float = 1e-4) -> list[OpCheck]:
        return [c for c in self.checks if not c.error < tol]

    def ops(self) -> set[str]:
        return {c.op for c in self.checks}


def _projected(op: str, inputs: list[np.ndarray], attrs: dict, arg: int, weight: np.ndarray):
    def f(x: Tensor) -> Tensor:
        args = [Tensor(a) for a in inputs]
        args[arg] = x
        y = forward_eval(op, args, **attrs)
        return (y * Tensor(weight)).sum()

    return f


def check_op(op: str, instances: int = 8, seed: int = 0) -> list[OpCheck]:
    """Gradient errors for ``instances`` random draws of one op, per input."""
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}")
    if op not in CASES:
        raise KeyError(f"no oracle case generator for op {op!r}")
    rng = np.random.default_rng([seed, sorted(OPS).index(op)])
    out = []
    for i in range(instances):
        inputs, attrs = CASES[op](rng)
        y = forward_eval(op, [Tensor(a) for a in inputs], **attrs)
        weight = rng.normal(size=y.shape)
        for arg in range(len(inputs)):
            f = _projected(op, inputs, attrs, arg, weight)
            if OPS[op].differentiable:
                err = grad_check(f, inputs[arg])
            else:
                # a barrier must contribute exactly nothing
                err = float(np.abs(analytic_grad(f, inputs[arg])).max())
            out.append(OpCheck(op, i, arg, err))
    return out


def run_suite(instances: int = 8, seed: int = 0, ops: list[str] | None = None) -> SuiteReport:
    """Check every registered op; an op with no case generator is an error."""
    report = SuiteReport()
    for op in sorted(OPS) if ops is None else ops:
        report.checks += check_op(op, instances, seed)
    return report
