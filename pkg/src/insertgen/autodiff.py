"""Dense float64 tensors with reverse-mode autodiff on a dynamic tape.

The tape is an append-only record of one forward pass and is rebuilt for
every pass, so shapes are free to differ between passes (partial sequences
grow during decoding). Broadcasting is deliberately restricted: a binary op
takes equal shapes, an operand whose shape matches the trailing axes of the
other (broadcast over leading batch axes only), or one of equal rank whose
axes are each equal or 1 (keepdims-style). Anything fancier needs an
explicit reshape.

Every op checks its output for NaN/Inf and raises NonFiniteError instead of
letting poison propagate. Masked logits should therefore use a large finite
bias (e.g. -1e9) rather than -inf; exp() of that still underflows to an
exact 0.0.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "constant",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding_lookup",
    "take",
    "sum_all",
    "logsumexp_all",
    "dropout",
    "cross_entropy_from_log_probs",
    "backward",
]


class AutodiffError(Exception):
    """Base class for tape, shape, and numeric errors."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    # One reduction instead of np.isfinite(data).all(): any NaN/Inf poisons
    # the sum, and sums of finite values cannot overflow at our magnitudes.
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tape:
    """Append-only record of one forward pass.

    A tape created with recording=False evaluates values only; no nodes are
    stored and backward() on it is an error. backward() may run at most once
    per tape; build a fresh tape for the next pass.
    """

    __slots__ = ("nodes", "recording", "_backward_done")

    def __init__(self, recording: bool = True):
        self.nodes: list[Tensor] = []
        self.recording = recording
        self._backward_done = False

    def leaf(self, data, name: str | None = None) -> "Tensor":
        """Register a trainable leaf (parameter) living on this tape."""
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        return Tensor(arr, tape=self, requires_grad=self.recording, name=name)


class Tensor:
    __slots__ = ("data", "tape", "parents", "vjp", "grad", "requires_grad", "name")

    def __init__(
        self,
        data: np.ndarray,
        tape: Tape | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = data
        self.tape = tape
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros(self.shape, dtype=np.float64)
        return self.grad

    def __repr__(self) -> str:
        tag = self.name or ("node" if self.parents else "const")
        return f"Tensor({tag}, shape={self.shape})"

    # Operator sugar. Scalars multiply/divide via scale(); everything else
    # goes through the explicit op functions.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _merged_tape(parents: tuple[Tensor, ...]) -> Tape | None:
    tape = None
    for p in parents:
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif tape is not p.tape:
            raise AutodiffError("operands live on different tapes")
    return tape


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], make_vjp):
    """Wrap a forward result; record a node only when a gradient can flow."""
    _check_finite(data, op)
    tape = _merged_tape(parents)
    live = (
        tape is not None
        and tape.recording
        and any(p.requires_grad for p in parents)
    )
    out = Tensor(data, tape=tape, requires_grad=live)
    if live:
        out.parents = parents
        out.vjp = make_vjp()
        tape.nodes.append(out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _suffix_of(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    n = len(small)
    return len(big) >= n and (n == 0 or big[len(big) - n :] == small)


def _keepdims_of(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(big) == len(small) and all(s == b or s == 1 for b, s in zip(big, small))


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g back onto the operand shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g


def _broadcast_vjps(a: Tensor, b: Tensor, op: str):
    """Pick the gradient reducers for a restricted-broadcast binary op."""
    if a.shape == b.shape:
        return None, None
    if _suffix_of(a.shape, b.shape) or _keepdims_of(a.shape, b.shape):
        return None, b.shape
    if _suffix_of(b.shape, a.shape) or _keepdims_of(b.shape, a.shape):
        return a.shape, None
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ra, rb = _broadcast_vjps(a, b, "add")

    def make_vjp():
        def vjp(g):
            ga = g if ra is None else _sum_to_shape(g, ra)
            gb = g if rb is None else _sum_to_shape(g, rb)
            return ga, gb
        return vjp

    return _make("add", a.data + b.data, (a, b), make_vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ra, rb = _broadcast_vjps(a, b, "mul")

    def make_vjp():
        ad, bd = a.data, b.data

        def vjp(g):
            ga = g * bd if ra is None else _sum_to_shape(g * bd, ra)
            gb = g * ad if rb is None else _sum_to_shape(g * ad, rb)
            return ga, gb
        return vjp

    return _make("mul", a.data * b.data, (a, b), make_vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def make_vjp():
        def vjp(g):
            return (g * c,)
        return vjp

    return _make("scale", a.data * c, (a,), make_vjp)


def matmul(a, b) -> Tensor:
    """Matrix product: equal-rank (batch dims matching exactly), or a stack
    of matrices times one shared 2-D right matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

        def make_vjp():
            ad, bd = a.data, b.data

            def vjp(g):
                return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g
            return vjp
    elif b.ndim == 2:
        def make_vjp():
            ad, bd = a.data, b.data
            k, n = bd.shape

            def vjp(g):
                # Shared right matrix: its gradient sums over all leading axes.
                return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)
            return vjp
    else:
        raise ShapeError(f"matmul: unsupported rank pairing, {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b), make_vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose: need at least 2 dims")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(int(i) for i in np.argsort(axes))

    def make_vjp():
        def vjp(g):
            return (np.transpose(g, inv),)
        return vjp

    return _make("transpose", np.transpose(a.data, axes), (a,), make_vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = np.reshape(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    old = a.shape

    def make_vjp():
        def vjp(g):
            return (np.reshape(g, old),)
        return vjp

    return _make("reshape", data, (a,), make_vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: empty input")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def make_vjp():
        def vjp(g):
            return tuple(np.split(g, offsets, axis=axis))
        return vjp

    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), parts, make_vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def make_vjp():
        pos = a.data > 0

        def vjp(g):
            return (g * pos,)
        return vjp

    return _make("relu", np.maximum(a.data, 0.0), (a,), make_vjp)


def _shifted_exp(x: np.ndarray, axis: int):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return m, e, e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _, e, s = _shifted_exp(a.data, axis)
    y = e / s

    def make_vjp():
        def vjp(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
        return vjp

    return _make("softmax", y, (a,), make_vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m, _, s = _shifted_exp(a.data, axis)
    y = a.data - m - np.log(s)

    def make_vjp():
        def vjp(g):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
        return vjp

    return _make("log_softmax", y, (a,), make_vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias must cover the last axis, got {gain.shape}/{bias.shape} for {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def make_vjp():
        gd = gain.data
        d = x.shape[-1]
        lead = tuple(range(x.ndim - 1))

        def vjp(g):
            dg = (g * xhat).sum(axis=lead)
            db = g.sum(axis=lead)
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
            )
            return dx, dg, db
        return vjp

    return _make("layer_norm", out, (x, gain, bias), make_vjp)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a 2-D table by integer id."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise AutodiffError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )

    def make_vjp():
        rows, cols = table.shape

        def vjp(g):
            z = np.zeros((rows, cols), dtype=np.float64)
            np.add.at(z, idx, g)
            return (z,)
        return vjp

    return _make("embedding_lookup", table.data[idx], (table,), make_vjp)


def take(a, indices) -> Tensor:
    """Gather entries of the flattened tensor; result is 1-D."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise AutodiffError(f"take: index out of range for size {a.size}")

    def make_vjp():
        shape, size = a.shape, a.size

        def vjp(g):
            z = np.zeros(size, dtype=np.float64)
            np.add.at(z, idx, g)
            return (z.reshape(shape),)
        return vjp

    return _make("take", a.data.reshape(-1)[idx], (a,), make_vjp)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def make_vjp():
        shape = a.shape

        def vjp(g):
            return (np.broadcast_to(g, shape),)
        return vjp

    return _make("sum_all", np.asarray(a.data.sum()), (a,), make_vjp)


def logsumexp_all(a) -> Tensor:
    """log(sum(exp(x))) over every entry; scalar output."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("logsumexp_all: empty input")
    m = a.data.max()
    out = np.asarray(m + np.log(np.exp(a.data - m).sum()))

    def make_vjp():
        w = np.exp(a.data - out)

        def vjp(g):
            return (g * w,)
        return vjp

    return _make("logsumexp_all", out, (a,), make_vjp)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one mask from rng per call."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def make_vjp():
        def vjp(g):
            return (g * mask,)
        return vjp

    return _make("dropout", a.data * mask, (a,), make_vjp)


def cross_entropy_from_log_probs(logp, targets, mask=None) -> Tensor:
    """Mean of -logp[i, targets[i]] is not taken: returns the summed NLL.

    logp is (n, vocab) log-probabilities, targets the n gold ids; mask, if
    given, is an n-vector of 0/1 weights. Composed from primitive ops, so
    the gradient follows from their rules.
    """
    logp = _as_tensor(logp)
    tgt = np.asarray(targets, dtype=np.intp)
    if logp.ndim != 2 or tgt.ndim != 1 or tgt.shape[0] != logp.shape[0]:
        raise ShapeError(
            f"cross_entropy_from_log_probs: got logp {logp.shape}, targets {tgt.shape}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logp.shape[1]):
        raise AutodiffError("cross_entropy_from_log_probs: target id out of range")
    picked = take(logp, np.arange(tgt.shape[0]) * logp.shape[1] + tgt)
    if mask is not None:
        picked = mul(picked, constant(mask))
    return scale(sum_all(picked), -1.0)


def backward(loss: Tensor) -> None:
    """Accumulate adjoints of everything loss depends on into .grad.

    loss must be a scalar on a recording tape. A second backward on the
    same tape is an error; build a new tape instead.
    """
    if loss.shape != ():
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.recording:
        raise AutodiffError("backward: loss is not on a recording tape")
    if tape._backward_done:
        raise AutodiffError("backward: tape already consumed; build a new tape")
    tape._backward_done = True
    if not loss.requires_grad:
        return  # constant loss: nothing depends on any leaf
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
