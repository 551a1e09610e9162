"""Reverse-mode automatic differentiation over dense rank-4 tensors.

Values are numpy arrays laid out (batch, channel, height, width). Operations
execute eagerly; when a :class:`Tape` is active they also record a backward
rule, and ``tape.backward(loss)`` replays the rules in reverse recording
order, accumulating gradients into leaf tensors and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, TapeError

Shape4 = tuple[int, int, int, int]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A rank-4 array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "name", "_producer")

    def __init__(self, data, name: str = ""):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ContractError(f"tensor must be rank-4 (n,c,h,w), got shape {arr.shape}")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self._producer: Tape | None = None  # tape that created this tensor, if any

    @property
    def shape(self) -> Shape4:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{tag} shape={self.shape} dtype={self.data.dtype}>"


class Parameter(Tensor):
    """A trainable leaf. Its gradient buffer always exists and matches the value shape."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)


@dataclass
class Node:
    """One recorded operation: output, ordered inputs, and a backward rule.

    ``backward`` maps the output gradient to one gradient per input (None for
    inputs the op does not differentiate through).
    """

    op_kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; reverse replay implements backprop.

    Tensors recorded later can only consume tensors recorded earlier, so the
    reverse of recording order is a valid topological order.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: list[Tensor] = []
        self._known: set[int] = set()  # id() of every tensor this tape has seen

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf tensor so gradients can accumulate into it."""
        if id(t) in self._known:
            return t
        if t._producer is not None and t._producer is not self:
            raise TapeError("tensor was produced on a different tape")
        self._known.add(id(t))
        self._leaves.append(t)
        return t

    def record(self, op_kind: str, inputs: Sequence[Tensor], out: Tensor,
               backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> int:
        """Append one operation; returns its node id. Leaf inputs are auto-watched."""
        for t in inputs:
            if id(t) in self._known:
                continue
            if t._producer is None:
                self.watch(t)
            else:
                raise TapeError(f"input of {op_kind} is an intermediate unknown to this tape")
        out._producer = self
        self._known.add(id(out))
        self._nodes.append(Node(op_kind, tuple(inputs), out, backward))
        return len(self._nodes) - 1

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf and parameter on this tape."""
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"loss must be scalar-shaped (1,1,1,1), got {loss.shape}")
        if id(loss) not in self._known:
            raise TapeError("loss tensor is unknown to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None and isinstance(p, Parameter):
            p.grad = np.zeros_like(p.data)
        else:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Primitive recorded operations. Shape checks are strict: the only broadcasts
# supported are the channel gate (n,c,1,1) and the spatial gate (n,1,h,w).
# ---------------------------------------------------------------------------

def _emit(op_kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape.record(op_kind, inputs, out, backward)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * s, lambda g: (g * s,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # 0 at 0: subgradient there is taken as 0
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on exact ties the gradient routes to the first argument."""
    _check_same_shape("maximum", a, b)
    take_a = a.data >= b.data
    return _emit("maximum", (a, b), np.where(take_a, a.data, b.data),
                 lambda g: (g * take_a, g * ~take_a))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _emit("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1),
                 lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c = a.shape[1]
    if not (0 <= start < stop <= c):
        raise ContractError(f"slice_channels: [{start}:{stop}] out of range for c={c}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_channels", (a,), a.data[:, start:stop].copy(), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.full((1, 1, 1, 1), a.data.sum(dtype=a.data.dtype), dtype=a.data.dtype)
    return _emit("sum_all", (a,), data, lambda g: (np.full_like(a.data, g.item()),))


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size
    data = np.full((1, 1, 1, 1), a.data.sum(dtype=a.data.dtype) * inv, dtype=a.data.dtype)
    return _emit("mean_all", (a,), data, lambda g: (np.full_like(a.data, g.item() * inv),))


def mul_channel_gate(gate: Tensor, x: Tensor) -> Tensor:
    """(n,c,1,1) gate times (n,c,h,w) map."""
    n, c, h, w = x.shape
    if gate.shape != (n, c, 1, 1):
        raise ContractError(f"channel gate must be {(n, c, 1, 1)}, got {gate.shape}")
    gd, xd = gate.data, x.data
    return _emit("mul_channel_gate", (gate, x), gd * xd,
                 lambda g: ((g * xd).sum(axis=(2, 3), keepdims=True), g * gd))


def mul_spatial_gate(gate: Tensor, x: Tensor) -> Tensor:
    """(n,1,h,w) gate times (n,c,h,w) map."""
    n, c, h, w = x.shape
    if gate.shape != (n, 1, h, w):
        raise ContractError(f"spatial gate must be {(n, 1, h, w)}, got {gate.shape}")
    gd, xd = gate.data, x.data
    return _emit("mul_spatial_gate", (gate, x), gd * xd,
                 lambda g: ((g * xd).sum(axis=1, keepdims=True), g * gd))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-input maximum relative error between analytic and numeric gradients."""

    per_input: dict[str, float]
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_input.values()) if self.per_input else 0.0

    def __str__(self) -> str:
        rows = ", ".join(f"{k}={v:.3e}" for k, v in self.per_input.items())
        return f"GradCheckReport(max={self.max_rel_err:.3e}, {rows})"


def grad_check(f: Callable[[], Tensor], wrt, eps: float = 1e-5,
               samples: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar function ``f`` against central differences.

    ``wrt`` is a mapping name -> Tensor (or a sequence of Tensors); ``f`` must
    close over those tensors and read their ``.data``. All checked tensors
    must be float64. With ``samples`` set, only that many randomly chosen
    elements per tensor are perturbed; otherwise every element is.
    """
    if isinstance(wrt, dict):
        named = list(wrt.items())
    else:
        named = [(t.name or f"input{i}", t) for i, t in enumerate(wrt)]
    for name, t in named:
        if t.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 inputs; {name} is {t.data.dtype}")

    y0 = f()
    y1 = f()
    if not np.array_equal(y0.data, y1.data):
        raise ContractError("grad_check refused: f is not deterministic")
    if y0.shape != (1, 1, 1, 1):
        raise ContractError(f"grad_check requires a scalar-valued f, got shape {y0.shape}")

    saved = [(t, t.grad) for _, t in named]
    try:
        for _, t in named:
            t.grad = None
        with Tape() as tape:
            loss = f()
            tape.backward(loss)
        analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                    for name, t in named}
    finally:
        for t, g in saved:
            t.grad = g

    if rng is None:
        rng = np.random.default_rng(0)
    report: dict[str, float] = {}
    for name, t in named:
        flat = t.data.reshape(-1)
        size = flat.size
        if samples is None or samples >= size:
            idxs = np.arange(size)
        else:
            idxs = rng.choice(size, size=samples, replace=False)
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().data.item()
            flat[i] = orig - eps
            fm = f().data.item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(ga[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
        report[name] = worst
    return GradCheckReport(per_input=report, eps=eps)
