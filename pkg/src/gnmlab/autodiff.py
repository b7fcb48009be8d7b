"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every differentiable value is a :class:`Tensor` wrapping an ndarray. Applying a
primitive records the node on an implicit tape (links to parents plus a closure
that routes the output gradient to them); :func:`backward` walks that tape once
in reverse topological order. The graph is rebuilt on every forward pass and
freed with the tensors, so there is no retained state between steps.

Single-threaded by design: one forward pass owns its tape. Callers that want
parallel loss evaluations must build each on its own tensors.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "apply_primitive",
    "backward",
    "tape_ops",
    "finite_diff_gradient",
    "matmul",
    "add",
    "sub",
    "scale",
    "relu",
    "layer_norm",
    "mean_all",
    "gather_rows",
    "concat_rows",
    "reshape",
    "linear",
    "softmax_cross_entropy",
]

LAYER_NORM_EPS = 1e-5

# Tape nodes recorded since import; tests diff this around a forward pass.
_TAPE_OPS = 0


def tape_ops() -> int:
    """Number of gradient-tracked primitive applications so far (monotone)."""
    return _TAPE_OPS


class Tensor:
    """A float64 ndarray plus an optional slot on the current tape.

    ``data`` is immutable by convention: no op in this module writes to an
    input's buffer, and optimizer steps build fresh tensors instead of mutating
    live ones. ``grad`` is the only mutable slot; it accumulates across
    backward calls until the owner clears it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no tape history."""
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Record one primitive application on the tape (if any parent needs grad)."""
    global _TAPE_OPS
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        _TAPE_OPS += 1
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """2-D matrix product. No implicit vector promotion."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # Same shape, or one side is a scalar. Nothing broader: silent broadcasting
    # is where elementwise gradients go wrong.
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op} needs matching shapes or a scalar, got {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g.sum() if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    """Elementwise sum; one operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    """Elementwise difference; one operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(factor)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(c * g)

    return _node(c * a.data, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient 0 at the kink

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bw)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize along the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ValueError(f"layer_norm needs a non-empty last axis, got shape {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (g - gm - y * gym))

    return _node(y, (a,), bw)


def mean_all(a) -> Tensor:
    """Mean over every entry, producing a 0-d tensor."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValueError("mean of an empty tensor")
    n = a.data.size

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.full(a.shape, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw)


def gather_rows(a, indices: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor by index (duplicates allowed)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows indices must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows index out of range for {a.shape[0]} rows")

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros(a.shape)
            np.add.at(buf, idx, g)  # duplicate indices accumulate
            a._accumulate(buf)

    return _node(a.data[idx], (a,), bw)


def concat_rows(tensors: Iterable) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    cols = {t.shape[1] if t.ndim == 2 else None for t in parts}
    if None in cols or len(cols) != 1:
        raise ValueError(f"concat_rows needs 2-D tensors with equal column counts, got {[t.shape for t in parts]}")
    offsets = np.cumsum([0] + [t.shape[0] for t in parts])

    def bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _node(np.concatenate([t.data for t in parts], axis=0), tuple(parts), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    new_shape = tuple(int(s) for s in shape)
    old_shape = a.shape

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return _node(a.data.reshape(new_shape), (a,), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w.T + b`` with weight rows as output units."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear needs x[B, in] and w[out, in], got {x.shape} and {w.shape}")
    out_data = x.data @ w.data.T
    if b is None:
        def bw(g: np.ndarray) -> None:
            if x.requires_grad:
                x._accumulate(g @ w.data)
            if w.requires_grad:
                w._accumulate(g.T @ x.data)

        return _node(out_data, (x, w), bw)

    b = _as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear bias must have shape ({w.shape[0]},), got {b.shape}")

    def bw_b(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(out_data + b.data, (x, w, b), bw_b)


def softmax_cross_entropy(logits, labels, sample_weights=None) -> Tensor:
    """Mean of per-sample weighted cross-entropy, stabilized by max subtraction.

    ``labels`` and ``sample_weights`` are constants (plain arrays); gradients
    flow into ``logits`` only. The result is the plain mean of
    ``w_i * ce_i`` — weights rescale samples, they do not renormalize.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy needs 2-D logits, got shape {logits.shape}")
    n, n_classes = logits.shape
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {n} integers, got shape {y.shape} dtype {y.dtype}")
    if n and (y.min() < 0 or y.max() >= n_classes):
        bad = int(y[(y < 0) | (y >= n_classes)][0])
        raise ValueError(f"label {bad} out of range for {n_classes} classes")
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"sample_weights must have shape ({n},), got {w.shape}")

    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    per_sample = -log_probs[np.arange(n), y]
    loss = float((w * per_sample).mean()) if n else 0.0

    def bw(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = ez / sez
            p[np.arange(n), y] -= 1.0
            logits._accumulate(float(g) * (w / n)[:, None] * p)

    return _node(np.asarray(loss), (logits,), bw)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda inputs, **kw: matmul(*inputs),
    "add": lambda inputs, **kw: add(*inputs),
    "sub": lambda inputs, **kw: sub(*inputs),
    "scale": lambda inputs, **kw: scale(inputs[0], kw["factor"]),
    "relu": lambda inputs, **kw: relu(inputs[0]),
    "layer-norm": lambda inputs, **kw: layer_norm(inputs[0]),
    "mean": lambda inputs, **kw: mean_all(inputs[0]),
    "gather-rows": lambda inputs, **kw: gather_rows(inputs[0], kw["indices"]),
    "concat-rows": lambda inputs, **kw: concat_rows(inputs),
}


def apply_primitive(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a named primitive; unknown kinds are rejected."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}; expected one of {sorted(_PRIMITIVES)}") from None
    return fn(list(inputs), **kwargs)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into every reachable ``grad`` slot.

    Gradients add onto whatever is already in ``grad``; clearing between steps
    is the caller's job. Rejects non-scalar losses and losses with no
    differentiable history (e.g. built purely from detached tensors).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad: every input is constant or detached")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:  # iterative DFS; recursion depth scales with graph depth otherwise
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss._accumulate(np.ones(()))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Ordered, named collection of leaf tensors; the optimizer's unit of work.

    Iteration order is insertion order everywhere (flatten, unflatten, bytes),
    which is what makes checkpoints and perturbations line up across runs.
    """

    def __init__(self, items: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]):
        pairs = items.items() if isinstance(items, Mapping) else items
        self._items: dict[str, Tensor] = {}
        for name, t in pairs:
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
            self._items[str(name)] = t

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> "ParamSet":
        return cls({name: Tensor(a, requires_grad=requires_grad) for name, a in arrays.items()})

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: t.shape for name, t in self._items.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._items.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    @property
    def k(self) -> int:
        """Total scalar dimension."""
        return sum(t.data.size for t in self._items.values())

    def flatten(self) -> np.ndarray:
        """All entries as one float64 vector, insertion order, row-major."""
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._items.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """Inverse of :meth:`flatten`: same names/shapes, fresh leaf tensors."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.k,):
            raise ValueError(f"expected a vector of length {self.k}, got shape {vec.shape}")
        out, lo = {}, 0
        for name, t in self._items.items():
            hi = lo + t.data.size
            out[name] = Tensor(vec[lo:hi].reshape(t.shape).copy(), requires_grad=True)
            lo = hi
        return ParamSet(out)

    def map_arrays(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        """Build a fresh ParamSet by transforming each array (keeps names/order)."""
        return ParamSet({name: Tensor(fn(name, t.data), requires_grad=True) for name, t in self._items.items()})

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Per-parameter gradients; raises if any slot is still empty."""
        out = {}
        for name, t in self._items.items():
            if t.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward first")
            out[name] = t.grad
        return out

    def to_bytes(self) -> bytes:
        """Little-endian float64 payload, insertion order; stable hash input."""
        return b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self._items.values())


def finite_diff_gradient(f: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``params``, one coordinate at a time.

    The independent oracle for every analytic gradient in this package. Cost is
    2k evaluations of ``f``; keep k small.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = params.flatten()
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            vec = base.copy()
            vec[i] += sign * h
            val = float(f(params.unflatten(vec)))
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite objective at coordinate {i} (offset {sign * h:+g})")
            grad[i] += sign * val
        grad[i] /= 2.0 * h
    return grad
