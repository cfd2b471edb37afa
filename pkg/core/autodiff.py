"""
Dense float64 tensors, a recorded tape and reverse-mode gradients.

Every operation is a method of `Tape`. A recording tape keeps one node per
operation (kind, inputs, output, backward closure holding the saved values);
`Tape(record=False)` only computes values and is used for inference and for
finite-difference probes.

    tape = Tape()
    leaves = store.bind(tape)
    loss = tape.reduce_sum(tape.matmul(x, leaves["w"]))
    backward(tape, loss, store)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from core.errors import ConfigError, DataError, MaskError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "leaky_relu", "exp", "log")


class Tensor:
    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _operand(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.float64(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _axis(op: str, a: Tensor, axis: int) -> int:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(op, a.shape, detail=f"axis {axis} out of range")
    return axis % a.data.ndim


class Routing:
    """Discrete choices (argmax indices, neighbour lists, activation sides) captured once and replayed.

    A replaying tape makes the same selections as the pass that recorded them, so a
    finite-difference probe stays inside one smooth piece of the function.
    """

    def __init__(self):
        self.decisions: list[tuple[str, object]] = []
        self.replay = False
        self._cursor = 0

    def decide(self, key: str, compute: Callable[[], object]):
        if not self.replay:
            value = compute()
            self.decisions.append((key, value))
            return value
        if self._cursor >= len(self.decisions) or self.decisions[self._cursor][0] != key:
            raise TapeError(f"routing replay diverged at decision {self._cursor} ({key})")
        value = self.decisions[self._cursor][1]
        self._cursor += 1
        return value

    def rewind(self):
        self.replay = True
        self._cursor = 0


class Tape:
    def __init__(self, record: bool = True, routing: Routing | None = None):
        self.record = record
        self.routing = routing
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._outputs: set[int] = set()

    # --- leaves

    def leaf(self, data, name: str, requires_grad: bool = True) -> Tensor:
        t = Tensor(data, name=name, requires_grad=requires_grad and self.record)
        self.leaves.append(t)
        return t

    def constant(self, data) -> Tensor:
        return Tensor(data)

    def decide(self, key: str, compute: Callable[[], object]):
        """Run a discrete selection, or replay it when the tape carries a replaying routing."""
        return compute() if self.routing is None else self.routing.decide(key, compute)

    def _emit(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op, f"output of shape {np.shape(data)}")
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self.nodes.append(Node(op, tuple(inputs), out, backward))
            self._outputs.add(id(out))
        return out

    # --- elementwise

    def _check_pair(self, op: str, a: Tensor, b: Tensor):
        if a.shape != b.shape and a.shape != () and b.shape != ():
            raise ShapeError(op, a.shape, b.shape, detail="only exact-match or scalar operands")

    def add(self, a: Tensor, b) -> Tensor:
        b = _operand(b)
        self._check_pair("add", a, b)
        return self._emit("add", (a, b), a.data + b.data,
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Tensor, b) -> Tensor:
        b = _operand(b)
        self._check_pair("sub", a, b)
        return self._emit("sub", (a, b), a.data - b.data,
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a: Tensor, b) -> Tensor:
        b = _operand(b)
        self._check_pair("mul", a, b)
        return self._emit("mul", (a, b), a.data * b.data,
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit("scale", (a,), a.data * c, lambda g: (g * c,))

    def leaky_relu(self, a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
        slope_mask = self.decide("leaky_relu", lambda: np.where(a.data > 0, 1.0, slope))
        return self._emit("leaky_relu", (a,), a.data * slope_mask, lambda g: (g * slope_mask,))

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.data)
        return self._emit("exp", (a,), out, lambda g: (g * out,))

    def log(self, a: Tensor) -> Tensor:
        if np.any(a.data <= 0):
            raise NonFiniteError("log", "argument must be positive")
        return self._emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))

    def elementwise(self, op: str, a: Tensor, b=None) -> Tensor:
        if op not in ELEMENTWISE_OPS:
            raise ConfigError(f"unknown elementwise op {op!r}")
        if op in ("add", "sub", "mul"):
            return getattr(self, op)(a, b)
        if op == "scale":
            if b is None:
                raise ConfigError("elementwise scale needs a factor")
            return self.scale(a, b)
        if op == "leaky_relu":
            return self.leaky_relu(a, LEAKY_SLOPE if b is None else b)
        return getattr(self, op)(a)

    # --- linear algebra and shape plumbing

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return self._emit("matmul", (a, b), a.data @ b.data,
                          lambda g: (g @ b.data.T, a.data.T @ g))

    def reshape(self, a: Tensor, shape) -> Tensor:
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, tuple(shape)) from None
        return self._emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))

    def concat_last(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim == 0 or a.shape[:-1] != b.shape[:-1]:
            raise ShapeError("concat_last", a.shape, b.shape)
        split = a.shape[-1]
        return self._emit("concat_last", (a, b), np.concatenate([a.data, b.data], axis=-1),
                          lambda g: (g[..., :split], g[..., split:]))

    def slice_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not 0 <= start < stop <= a.shape[-1]:
            raise ShapeError("slice_last", a.shape, detail=f"slice [{start}:{stop})")

        def backward(g):
            full = np.zeros(a.shape)
            full[..., start:stop] = g
            return (full,)

        return self._emit("slice_last", (a,), a.data[..., start:stop], backward)

    def gather_rows(self, a: Tensor, index) -> Tensor:
        index = np.asarray(index, dtype=np.intp)
        if index.ndim != 1:
            raise ShapeError("gather_rows", a.shape, index.shape, detail="index must be 1-D")

        def backward(g):
            full = np.zeros(a.shape)
            np.add.at(full, index, g)
            return (full,)

        return self._emit("gather_rows", (a,), a.data[index], backward)

    # --- reductions

    def reduce_sum(self, a: Tensor) -> Tensor:
        return self._emit("reduce_sum", (a,), np.asarray(a.data.sum()),
                          lambda g: (np.full(a.shape, float(g)),))

    def reduce_mean(self, a: Tensor) -> Tensor:
        n = a.data.size
        return self._emit("reduce_mean", (a,), np.asarray(a.data.mean()),
                          lambda g: (np.full(a.shape, float(g) / n),))

    def reduce_max(self, a: Tensor, axis: int) -> Tensor:
        axis = _axis("reduce_max", a, axis)
        if a.shape[axis] == 0:
            raise ShapeError("reduce_max", a.shape, detail=f"empty reduction axis {axis}")
        idx = self.decide("reduce_max", lambda: np.expand_dims(np.argmax(a.data, axis=axis), axis))
        out = np.take_along_axis(a.data, idx, axis).squeeze(axis)

        def backward(g):
            full = np.zeros(a.shape)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis)
            return (full,)

        return self._emit("reduce_max", (a,), out, backward)

    def masked_max(self, a: Tensor, mask, axis: int) -> Tensor:
        """Max over entries where `mask` is set; `mask` covers the leading axes of `a`.

        Fully masked slices produce 0 and pass no gradient.
        """
        mask = np.asarray(mask, dtype=bool)
        axis = _axis("masked_max", a, axis)
        if a.shape[:mask.ndim] != mask.shape or axis >= mask.ndim:
            raise ShapeError("masked_max", a.shape, mask.shape)
        full_mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (a.data.ndim - mask.ndim)), a.shape)
        filled = np.where(full_mask, a.data, -np.inf)
        idx = self.decide("masked_max", lambda: np.expand_dims(np.argmax(filled, axis=axis), axis))
        has = full_mask.any(axis=axis)
        out = np.where(has, np.take_along_axis(filled, idx, axis).squeeze(axis), 0.0)

        def backward(g):
            full = np.zeros(a.shape)
            np.put_along_axis(full, idx, np.expand_dims(np.where(has, g, 0.0), axis), axis)
            return (full,)

        return self._emit("masked_max", (a,), out, backward)

    # --- probabilistic heads

    def softmax_masked(self, logits: Tensor, mask, axis: int = -1, empty: str = "error") -> Tensor:
        try:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        except ValueError:
            raise ShapeError("softmax_masked", logits.shape, np.shape(mask)) from None
        has = mask.any(axis=axis, keepdims=True)
        if empty == "error" and not has.all():
            raise MaskError("softmax_masked: a reduced slice has no unmasked entry")
        x = np.where(mask, logits.data, -np.inf)
        top = np.where(has, x.max(axis=axis, keepdims=True), 0.0)
        e = np.where(mask, np.exp(x - top), 0.0)
        total = e.sum(axis=axis, keepdims=True)
        p = e / np.where(total > 0, total, 1.0)
        return self._emit("softmax_masked", (logits,), p,
                          lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),))

    def cross_entropy_logits(self, logits: Tensor, target) -> Tensor:
        k = logits.shape[-1]
        x = logits.data.reshape(-1, k)
        target = np.asarray(target, dtype=np.intp).reshape(-1)
        if target.shape[0] != x.shape[0]:
            raise ShapeError("cross_entropy_logits", logits.shape, target.shape)
        if target.size == 0:
            raise DataError("cross_entropy_logits: no entries")
        if target.min() < 0 or target.max() >= k:
            raise DataError(f"cross_entropy_logits: target class outside [0, {k})")
        rows = np.arange(x.shape[0])
        top = x.max(axis=1, keepdims=True)
        lse = top + np.log(np.exp(x - top).sum(axis=1, keepdims=True))
        loss = np.mean(lse[:, 0] - x[rows, target])

        def backward(g):
            p = np.exp(x - lse)
            p[rows, target] -= 1.0
            return ((float(g) / x.shape[0]) * p.reshape(logits.shape),)

        return self._emit("cross_entropy_logits", (logits,), np.asarray(loss), backward)

    def dropout(self, a: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return a
        keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
        return self._emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))

    # --- reverse pass

    def gradients(self, root: Tensor) -> dict[str, np.ndarray]:
        """d(root)/d(leaf) for every named leaf that requires a gradient."""
        if root.data.size != 1:
            raise ShapeError("backward", root.shape, detail="root must be scalar")
        if id(root) not in self._outputs and not any(root is t for t in self.leaves):
            raise TapeError("backward: root was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return {t.name: grads.get(id(t), np.zeros(t.shape)) for t in self.leaves if t.requires_grad}


class ParamStore:
    """Named parameters with paired gradient accumulators.

    Initialisation draws each entry uniformly from [-sqrt(1/fan_in), sqrt(1/fan_in)]
    using the store's seeded generator, in insertion order.
    """

    def __init__(self, seed: int = 1):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self._rng = np.random.default_rng(seed)

    def add(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> np.ndarray:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        bound = math.sqrt(1.0 / (fan_in or shape[0]))
        self.params[name] = self._rng.uniform(-bound, bound, size=shape)
        self.grads[name] = np.zeros(shape)
        return self.params[name]

    def set(self, name: str, array: np.ndarray):
        array = np.array(array, dtype=np.float64)
        if name in self.params and self.params[name].shape != array.shape:
            raise ShapeError("ParamStore.set", self.params[name].shape, array.shape, detail=name)
        self.params[name] = array
        self.grads[name] = np.zeros(array.shape)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], seed: int = 1) -> "ParamStore":
        store = cls(seed)
        for name, array in arrays.items():
            store.set(name, array)
        return store

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {n: tape.leaf(p, n, requires_grad=n not in self.frozen) for n, p in self.params.items()}

    def accumulate(self, grads: dict[str, np.ndarray], weight: float = 1.0):
        for name, g in grads.items():
            if name in self.frozen:
                continue
            if g.shape != self.grads[name].shape:
                raise ShapeError("accumulate", self.grads[name].shape, g.shape, detail=name)
            self.grads[name] += weight * g

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def freeze(self, names):
        self.frozen.update(names)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.copy() for n, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]):
        for name, array in snapshot.items():
            self.params[name][...] = array

    def names(self) -> list[str]:
        return list(self.params)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)


def backward(tape: Tape, root: Tensor, params: ParamStore):
    params.accumulate(tape.gradients(root))


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_steps < 1:
            raise ConfigError("optimizer needs base_lr > 0 and total_steps >= 1")

    def lr(self, step: int | None = None) -> float:
        # cosine schedule; reaches 0 only at step == total_steps
        t = min(self.step if step is None else step, self.total_steps)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * t / self.total_steps))


def sgd_step(params: ParamStore, state: OptimizerState):
    lr = state.lr()
    for name in sorted(params.params):
        if name in params.frozen:
            continue
        p = params.params[name]
        g = params.grads[name] + state.weight_decay * p
        v = state.buffers.get(name)
        v = g if v is None else state.momentum * v + g
        state.buffers[name] = v
        p -= lr * v
    state.step += 1
    params.zero_grad()


LossFn = Callable[[Tape, dict[str, Tensor]], Tensor]


def _loss_value(loss_fn: LossFn, params: ParamStore, routing: Routing | None) -> float:
    if routing is not None:
        routing.rewind()
    tape = Tape(record=False, routing=routing)
    value = float(loss_fn(tape, params.bind(tape)).data)
    if not math.isfinite(value):
        raise NonFiniteError("grad_check", "loss")
    return value


def grad_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               freeze_routing: bool = True) -> float:
    """Max over probed coordinates of |analytic - central| / max(1, |central|).

    `loss_fn` must be deterministic and build its graph on the tape it is given. With
    `max_coords`, each parameter probes at most that many coordinates drawn from `rng`;
    otherwise every coordinate is probed. With `freeze_routing`, the probes replay the
    argmax, neighbour and activation choices of the unperturbed pass.
    """
    routing = Routing() if freeze_routing else None
    tape = Tape(routing=routing)
    analytic = tape.gradients(loss_fn(tape, params.bind(tape)))
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name in sorted(analytic):
        flat = params.params[name].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        grad = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            plus = _loss_value(loss_fn, params, routing)
            flat[c] = orig - eps
            minus = _loss_value(loss_fn, params, routing)
            flat[c] = orig
            central = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(grad[c] - central) / max(1.0, abs(central)))
    logger.debug("grad_check over %d parameters: max relative error %.3e", len(analytic), worst)
    return worst
