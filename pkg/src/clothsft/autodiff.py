"""Reverse-mode differentiation over coarse vector-valued primitives.

This is not a general autodiff system: the forward pass is recorded as a tape
of a small number of primitives (simulation steps, rendering, loss terms, a
handful of glue ops), each registered together with a hand-written adjoint.
``Tape.backward`` then walks the tape once in reverse, accumulating adjoints.

Node values may be ndarrays, floats, or tuples of ndarrays (multi-output
primitives); tuple outputs are unpacked with :meth:`Tape.item`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LN10 = float(np.log(10.0))


class GradientError(Exception):
    """A backward pass produced a non-finite gradient."""


@dataclass
class _Node:
    op: str
    value: object
    parents: tuple[int, ...]
    vjp: object          # callable(grad_out) -> sequence of parent grads (or None)
    leaf_name: str | None = None


class Var:
    """Handle to a tape node; carries no data of its own."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var({node.op}#{self.idx})"


def _zeros_like(value):
    if isinstance(value, tuple):
        return tuple(_zeros_like(v) for v in value)
    if isinstance(value, np.ndarray):
        return np.zeros_like(value)
    return 0.0


def _accumulate(buf, grad):
    if grad is None:
        return buf
    if buf is None:
        return grad if not isinstance(grad, tuple) else tuple(g for g in grad)
    if isinstance(buf, tuple):
        return tuple(_accumulate(b, g) for b, g in zip(buf, grad))
    return buf + grad


def _is_finite(grad) -> bool:
    if grad is None:
        return True
    if isinstance(grad, tuple):
        return all(_is_finite(g) for g in grad)
    return bool(np.all(np.isfinite(grad)))


class Tape:
    """Records primitives during the forward pass; replays adjoints in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, node: _Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str) -> Var:
        """Register a differentiable input; backward() reports its gradient by name."""
        return self._push(_Node("leaf", value, (), None, leaf_name=name))

    def constant(self, value) -> Var:
        """A value that participates in the graph but receives no gradient."""
        return self._push(_Node("const", value, (), None))

    def record(self, op: str, value, parents: tuple[Var, ...], vjp) -> Var:
        return self._push(_Node(op, value, tuple(p.idx for p in parents), vjp))

    def stop_gradient(self, v: Var) -> Var:
        return self._push(_Node("stop_gradient", v.value, (v.idx,), lambda g: [None]))

    def item(self, v: Var, k: int) -> Var:
        """Project component k out of a tuple-valued node."""
        value = v.value[k]
        n_out = len(v.value)

        def vjp(grad):
            slot = [None] * n_out
            slot[k] = grad
            return [tuple(slot)]

        return self._push(_Node(f"item[{k}]", value, (v.idx,), vjp))

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Adjoints of a scalar loss w.r.t. every named leaf.

        Raises GradientError naming the offending node if any adjoint goes
        non-finite.
        """
        loss_value = loss.value
        if not np.isscalar(loss_value) and np.ndim(loss_value) != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {np.shape(loss_value)}")
        adjoints: list = [None] * len(self.nodes)
        adjoints[loss.idx] = 1.0
        grads: dict[str, np.ndarray] = {}
        for idx in range(loss.idx, -1, -1):
            node = self.nodes[idx]
            grad_out = adjoints[idx]
            if grad_out is None:
                continue
            if node.op == "leaf":
                grads[node.leaf_name] = _accumulate(grads.get(node.leaf_name), grad_out)
                continue
            if node.vjp is None:
                continue
            parent_grads = node.vjp(_merge_tuple_zeros(grad_out, node.value))
            for pidx, g in zip(node.parents, parent_grads):
                if not _is_finite(g):
                    raise GradientError(
                        f"non-finite gradient produced by node #{idx} ({node.op}) "
                        f"for parent #{pidx} ({self.nodes[pidx].op})")
                adjoints[pidx] = _accumulate(adjoints[pidx], g)
            adjoints[idx] = None  # free memory as we go
        return grads


def _merge_tuple_zeros(grad, value):
    """Replace missing tuple slots with zeros so vjps see dense tuples."""
    if not isinstance(value, tuple):
        return grad
    slots = list(grad) if isinstance(grad, tuple) else [None] * len(value)
    return tuple(_zeros_like(v) if g is None else g for g, v in zip(slots, value))


# ---------------------------------------------------------------------------
# Generic glue primitives

def pow10(tape: Tape, v: Var) -> Var:
    """10**x for a scalar Var (log10-parameterized stiffnesses)."""
    out = 10.0 ** float(v.value)
    return tape.record("pow10", out, (v,), lambda g: [g * LN10 * out])


def weighted_sum(tape: Tape, vars_: list[Var], weights) -> Var:
    """Scalar linear combination sum_i w_i * x_i."""
    w = [float(x) for x in weights]
    value = float(sum(wi * float(v.value) for wi, v in zip(w, vars_)))
    return tape.record("weighted_sum", value, tuple(vars_),
                       lambda g: [g * wi for wi in w])


def mean_of(tape: Tape, vars_: list[Var]) -> Var:
    return weighted_sum(tape, vars_, [1.0 / len(vars_)] * len(vars_))


# ---------------------------------------------------------------------------
# Gradient clipping

def clip_to_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale grad down to max_norm if its L2 norm exceeds it; returns (grad, norm)."""
    norm = float(np.linalg.norm(np.asarray(grad, dtype=float).ravel()))
    if norm > max_norm and norm > 0.0:
        return grad * (max_norm / norm), norm
    return grad, norm


@dataclass
class GradientClipper:
    """Per-parameter-group clipping: fixed max-norm first, then auto-clip.

    Auto mode clips each group to the p-th percentile of that group's norm
    history (the norm observed after the fixed clip is appended before the
    percentile is taken, so a constant-norm stream converges to that norm).
    """

    max_norm: float = 1000.0
    auto: bool = True
    percentile: float = 10.0
    history: dict[str, list[float]] = field(default_factory=dict)

    def clip(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name in grads:
            g, _ = clip_to_norm(grads[name], self.max_norm)
            if self.auto:
                norm = float(np.linalg.norm(np.asarray(g, dtype=float).ravel()))
                hist = self.history.setdefault(name, [])
                hist.append(norm)
                threshold = float(np.percentile(hist, self.percentile))
                if norm > threshold > 0.0:
                    g = g * (threshold / norm)
            out[name] = g
        return out

    def thresholds(self) -> dict[str, float]:
        return {name: float(np.percentile(hist, self.percentile))
                for name, hist in self.history.items() if hist}
