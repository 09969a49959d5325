"""Dense float64 tensors with taped reverse-mode differentiation, plus Adam.

Deliberately minimal: 2-D matmul, broadcastable add/mul, the pointwise
nonlinearities the melody model needs, reductions, concat/slice/gather and
a fused softmax cross-entropy.  Each op closes over its inputs and a
vector-Jacobian product; ``backward`` orders the graph under a scalar loss
into a :class:`Tape` and walks it once in reverse.

Numerical guards: ``log`` clamps its argument at 1e-300 and ``exp`` clamps
its input at 700, so no NaN/Inf escapes an op given finite inputs; inside
the clamped region the reported derivative is that of the unclamped map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_EXP_MAX = 700.0
_LOG_MIN = 1e-300


class GradientCheckError(AssertionError):
    """Finite-difference verification exceeded its tolerance."""


class Tensor:
    """A node in the computation graph: a float64 array plus gradient slot."""

    __slots__ = ("value", "grad", "parents", "vjp", "name", "param")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
        name: str | None = None,
        param: bool = False,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # arithmetic sugar; scalars are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str) -> Tensor:
    return Tensor(value, name=name, param=True)


def constant(value, name: str | None = None) -> Tensor:
    return Tensor(value, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    value = a.value + b.value
    return Tensor(
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    value = a.value - b.value
    return Tensor(
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    value = a.value * b.value
    return Tensor(
        value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    value = a.value @ b.value
    return Tensor(value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    e = np.exp(-np.abs(x))  # overflow-safe on both tails
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(np.minimum(a.value, _EXP_MAX))
    return Tensor(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.value, _LOG_MIN)
    return Tensor(np.log(clamped), (a,), lambda g: (g / clamped,))


def absolute(a: Tensor) -> Tensor:
    return Tensor(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def mean(a: Tensor) -> Tensor:
    size = a.value.size
    return Tensor(
        a.value.mean(), (a,), lambda g: (np.full(a.value.shape, float(g) / size),)
    )


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return Tensor(a.value.sum(), (a,), lambda g: (np.full(a.value.shape, float(g)),))

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return Tensor(a.value.sum(axis=axis), (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor(np.concatenate(values, axis=axis), tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = tuple(
        slice(start, stop) if d == axis else slice(None) for d in range(a.value.ndim)
    )

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        out = np.zeros(a.value.shape)
        out[index] = g
        return (out,)

    return Tensor(a.value[index], (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.value.shape
    return Tensor(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(original),)
    )


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding); gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        out = np.zeros(table.value.shape)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor(table.value[ids], (table,), vjp)


def pairwise_diff(v: Tensor) -> Tensor:
    """All signed differences of a vector: out[j, k] = v[j] - v[k]."""
    if v.value.ndim != 1:
        raise ValueError("pairwise_diff expects a 1-D tensor")
    value = v.value[:, None] - v.value[None, :]
    return Tensor(value, (v,), lambda g: (g.sum(axis=1) - g.sum(axis=0),))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-sample cross-entropy of integer targets under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.value
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ValueError("expected logits (B, C) and targets (B,)")
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(x.shape[0])
    losses = -log_probs[rows, targets]
    probs = np.exp(log_probs)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        grad = probs * g[:, None]
        grad[rows, targets] -= g
        return (grad,)

    return Tensor(losses, (logits,), vjp)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


class Tape:
    """Topologically ordered record of the ops reachable from a root node."""

    def __init__(self, root: Tensor):
        self.nodes = self._order(root)

    @staticmethod
    def _order(root: Tensor) -> list[Tensor]:
        # iterative post-order DFS; graphs here are deep chains of GRU steps
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` on every node reachable from a scalar loss.

    Parameters passed in but unreachable from the loss get zero gradients.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    params = list(params)
    for p in params:  # clear stale gradients on params the tape may not reach
        p.grad = None
    tape = Tape(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(tape.nodes):
        if node.vjp is None or node.grad is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(node.grad)):
            parent.grad = grad if parent.grad is None else parent.grad + grad
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.value.shape)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad.copy() for name, p in params.items()}


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        grads = {name: g * factor for name, g in grads.items()}
    return grads, total


@dataclass
class AdamState:
    """Adam accumulators; ``lr`` is mutable so schedules can drive it."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, Tensor]:
    """Standard bias-corrected Adam update, applied in place."""
    state.step += 1
    b1_correction = 1.0 - state.beta1**state.step
    b2_correction = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name} {p.value.shape}"
            )
        m = state.m.setdefault(name, np.zeros(p.value.shape))
        v = state.v.setdefault(name, np.zeros(p.value.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / b1_correction
        v_hat = v / b2_correction
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-4,
    tol: float | None = None,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Compare taped gradients of a deterministic scalar ``f`` to central differences.

    Checks a random subsample of at most ``max_coords`` coordinates and
    returns the worst relative error; raises GradientCheckError when ``tol``
    is given and exceeded.
    """
    loss = f()
    backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    coords = [
        (name, flat)
        for name, p in params.items()
        for flat in range(p.value.size)
    ]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    worst = 0.0
    for name, flat in coords:
        view = params[name].value.reshape(-1)
        original = view[flat]
        view[flat] = original + h
        f_plus = float(f().value)
        view[flat] = original - h
        f_minus = float(f().value)
        view[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        exact = analytic[name].reshape(-1)[flat]
        error = abs(numeric - exact) / max(abs(numeric) + abs(exact), 1e-6)
        worst = max(worst, error)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative error {worst:g} exceeds {tol:g}")
    return worst


def save_checkpoint(
    base: str | Path, params: dict[str, Tensor], metadata: dict | None = None
) -> None:
    """Write ``<base>.bin`` (flat float64 arrays) and ``<base>.json`` manifest."""
    base = Path(base)
    entries = []
    offset = 0
    blobs = []
    for name, p in params.items():
        raw = np.ascontiguousarray(p.value, dtype=np.float64).tobytes()
        entries.append(
            {"name": name, "shape": list(p.value.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {"dtype": "float64", "arrays": entries, "metadata": metadata or {}}
    base.with_suffix(".bin").write_bytes(b"".join(blobs))
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    manifest = json.loads(base.with_suffix(".json").read_text())
    blob = base.with_suffix(".bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        flat = np.frombuffer(blob[start : start + nbytes], dtype=np.float64)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return arrays, manifest.get("metadata", {})
