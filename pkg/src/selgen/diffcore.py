"""Dense double-precision tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to one adjoint per parent.  Graphs are
built per example and thrown away; parameters are leaf tensors kept in a
:class:`ParamStore`.

Broadcasting is deliberately absent.  The only implicit expansion is a
scalar (size-1) operand in the elementwise ops.
"""
from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamStore",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "scale",
    "sigmoid",
    "tanh",
    "lstm_cell",
    "activation",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "slice_vec",
    "take",
    "row",
    "tile_rows",
    "transpose",
    "total",
    "square",
    "vmax",
    "backward",
    "grad_check",
    "finite_differences",
    "relative_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


class Tensor:
    """A value in the differentiation graph.

    ``data`` is a float64 ndarray (row-major).  ``grad`` holds the adjoint
    accumulated by :func:`backward`; it is allocated lazily for interior
    nodes and eagerly for parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple[Tensor, ...] = (),
        backward_fn: Callable | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.name = name
        self.grad = np.zeros_like(arr) if (requires_grad and op == "leaf") else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """Wrap data as a non-differentiable leaf."""
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    """Wrap data as a differentiable leaf with a zeroed gradient buffer."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data, op: str, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=fn)
    return Tensor(data, op=op)


# --------------------------------------------------------------------------- ops


class _Outer:
    """Deferred rank-1 gradient ``outer(u, v)``; parameter adjoints sum these with one matmul."""

    __slots__ = ("u", "v")

    def __init__(self, u: np.ndarray, v: np.ndarray):
        self.u, self.v = u, v

    def dense(self) -> np.ndarray:
        return np.outer(self.u, self.v)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  1-D operands act as row (left) or column (right) vectors."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = ad @ bd

    def fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return _Outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, _Outer(ad, g)
        return g * bd, g * ad

    return _node(out, "matmul", (a, b), fn)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("add", a, b)
    return _node(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b), lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, a), _unbroadcast(-g * out / bd, b)

    return _node(out, "div", (a, b), fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        return _ELEMENTWISE[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # symmetric form: never exponentiates a positive number
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def lstm_cell(gates: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM nonlinearity on pre-activations ordered ``(i, f, o, g)``.

    Returns ``(h; c)`` as one 2H vector.
    """
    H = c_prev.size
    if gates.data.ndim != 1 or c_prev.data.ndim != 1 or gates.size != 4 * H:
        raise ShapeError("lstm_cell", gates.shape, c_prev.shape)
    x, cp = gates.data, c_prev.data
    sig = _sigmoid(x[: 3 * H])
    i, f, o = sig[:H], sig[H : 2 * H], sig[2 * H :]
    gg = np.tanh(x[3 * H :])
    c = f * cp + i * gg
    tc = np.tanh(c)
    h = o * tc

    def fn(g):
        gh, gc = g[:H], g[H:]
        dc_ = gc + gh * o * (1.0 - tc * tc)
        dx = np.empty(4 * H)
        dx[:H] = dc_ * gg * i * (1.0 - i)
        dx[H : 2 * H] = dc_ * cp * f * (1.0 - f)
        dx[2 * H : 3 * H] = gh * tc * o * (1.0 - o)
        dx[3 * H :] = dc_ * i * (1.0 - gg * gg)
        return dx, dc_ * f

    return _node(np.concatenate([h, c]), "lstm_cell", (gates, c_prev), fn)


def activation(kind: str, a: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), "log", (a,), lambda g: (g / x,))


def _check_vector(op: str, a: Tensor) -> None:
    if a.data.ndim != 1:
        raise ShapeError(op, a.shape)
    if a.data.size == 0:
        raise ValueError(f"{op}: empty input")


def softmax(a: Tensor) -> Tensor:
    _check_vector("softmax", a)
    e = np.exp(a.data - a.data.max())
    y = e / e.sum()

    def fn(g):
        return (y * (g - np.dot(g, y)),)

    return _node(y, "softmax", (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    _check_vector("log_softmax", a)
    shifted = a.data - a.data.max()
    lse = np.log(np.exp(shifted).sum())
    y = shifted - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(),)

    return _node(y, "log_softmax", (a,), fn)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join vectors end to end; zero-length parts are allowed."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: no parts")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError("concat", *(q.shape for q in parts))
    sizes = [p.data.size for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts])

    def fn(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(out, "concat", parts, fn)


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one vector per row."""
    rows = tuple(rows)
    if not rows:
        raise ValueError("stack: no rows")
    shape = rows[0].shape
    if len(shape) != 1 or any(r.shape != shape for r in rows):
        raise ShapeError("stack", *(r.shape for r in rows))
    out = np.stack([r.data for r in rows])
    return _node(out, "stack", rows, lambda g: tuple(g[i] for i in range(len(rows))))


def slice_vec(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 1 or not 0 <= start <= stop <= a.data.size:
        raise ShapeError("slice_vec", a.shape)
    n = a.data.size

    def fn(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], "slice", (a,), fn)


def take(a: Tensor, index: int) -> Tensor:
    """Select one element of a vector as a size-1 tensor."""
    if a.data.ndim != 1:
        raise ShapeError("take", a.shape)
    n = a.data.size
    if not 0 <= index < n:
        raise IndexError(f"take: index {index} out of range for length {n}")

    def fn(g):
        full = np.zeros(n)
        full[index] = g.reshape(-1)[0]
        return (full,)

    return _node(a.data[index : index + 1], "take", (a,), fn)


def row(a: Tensor, index: int) -> Tensor:
    """Select one row of a matrix (embedding lookup)."""
    if a.data.ndim != 2:
        raise ShapeError("row", a.shape)
    rows = a.data.shape[0]
    if not 0 <= index < rows:
        raise IndexError(f"row: index {index} out of range for {rows} rows")

    def fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(a.data[index], "row", (a,), fn)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as the ``n`` rows of a matrix."""
    if v.data.ndim != 1 or n < 1:
        raise ShapeError("tile_rows", v.shape)
    out = np.tile(v.data, (n, 1))
    return _node(out, "tile_rows", (v,), lambda g: (g.sum(axis=0),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a size-1 tensor."""
    shape = a.shape
    return _node(np.array([a.data.sum()]), "sum", (a,), lambda g: (np.full(shape, g.reshape(-1)[0]),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _node(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def vmax(a: Tensor) -> Tensor:
    """Maximum of a vector; the adjoint goes to the first maximal entry only."""
    _check_vector("vmax", a)
    k = int(np.argmax(a.data))
    n = a.data.size

    def fn(g):
        full = np.zeros(n)
        full[k] = g.reshape(-1)[0]
        return (full,)

    return _node(a.data[k : k + 1], "max", (a,), fn)


# ----------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable differentiable leaf.

    Interior adjoints are recomputed from scratch on each call, so calling
    twice without zeroing doubles parameter gradients and nothing else.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    order = _topological(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    factors: dict[int, tuple[Tensor, list, list]] = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if type(pg) is _Outer:
                if parent._backward is None:
                    entry = factors.setdefault(key, (parent, [], []))
                    entry[1].append(pg.u)
                    entry[2].append(pg.v)
                    continue
                pg = pg.dense()
            if key in adj:
                adj[key] += pg
            else:
                adj[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    for leaf, us, vs in factors.values():
        leaf.grad += np.stack(us, axis=1) @ np.stack(vs)


# --------------------------------------------------------------------- parameters


class ParamStore:
    """Insertion-ordered mapping from stable names to parameter tensors."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._params: dict[str, Tensor] = {}
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(value, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad.fill(0.0)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self._params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def copy(self) -> ParamStore:
        return ParamStore((k, t.data.copy()) for k, t in self._params.items())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_differences(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Backprop and central-difference gradients, ``{name: (analytic, numeric)}``.

    ``f`` must be deterministic; it is called twice per coordinate.
    Parameter values are restored exactly and gradients left zeroed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    out = f(params)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: f is not finite at the base point")
    backward(out)
    result = {}
    for name in names if names is not None else params.names():
        t = params[name]
        analytic = t.grad.copy()
        numeric = np.empty_like(analytic)
        flat, num = t.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).item()
            flat[i] = orig - eps
            fm = f(params).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: f not finite perturbing {name}[{i}]")
            num[i] = (fp - fm) / (2.0 * eps)
        result[name] = (analytic, numeric)
    params.zero_grad()
    return result


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` between backprop and central differences."""
    worst = 0.0
    for analytic, numeric in finite_differences(f, params, eps, names).values():
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
