"""Dense 2-D float64 matrices with a small reverse-mode gradient tape.

Every public operation returns an immutable :class:`Matrix`. When a
:class:`GradientTape` is active and at least one input is trainable (or was
itself produced on the tape), the operation is recorded together with its
vector-Jacobian product so that :func:`backward` can replay it.

Random streams use numpy's Philox4x32-10 counter-based generator. A stream
is addressed by an integer seed plus a path of names/indices, hashed into a
``SeedSequence`` spawn key, so every stochastic site (initialisation,
dropout, data) owns an independent and reproducible stream.
"""
from __future__ import annotations

import contextlib
import zlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError

__all__ = [
    "Matrix", "Parameter", "GradientTape", "backward", "finite_diff_check",
    "matmul", "add", "add_n", "add_bias", "scale", "scale_by", "scale_cols",
    "hadamard",
    "mul_const", "sum_all", "layer_norm", "gelu", "softmax_rows",
    "attention", "mean_pool", "cross_entropy", "gaussian_init", "stream",
    "derive_seed", "count_ops",
]

# Incremented by every matmul-like primitive; read through count_ops().
OP_COUNTS: Counter = Counter()


class Matrix:
    """Immutable row-major float64 matrix."""

    __slots__ = ("_data", "name")
    trainable = False

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("non-finite entries in Matrix")
        arr.flags.writeable = False
        self._data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Matrix":
        # Trusted constructor for freshly computed arrays (no copy).
        if not np.isfinite(arr).all():
            raise NumericError("operation produced non-finite values")
        m = object.__new__(Matrix)
        arr.flags.writeable = False
        m._data = arr
        m.name = None
        return m

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self._data[0, 0])

    def tolist(self) -> list[list[float]]:
        return self._data.tolist()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{label} {self.rows}x{self.cols}>"

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)


class Parameter(Matrix):
    """Trainable leaf. Only the optimizer should call :meth:`assign`."""

    __slots__ = ()
    trainable = True

    def assign(self, value: np.ndarray) -> None:
        arr = np.array(value, dtype=np.float64, copy=True)
        if arr.shape != self._data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self._data.shape}")
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value assigned to {self.name or 'parameter'}")
        arr.flags.writeable = False
        self._data = arr


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["GradientTape"] = []


class GradientTape:
    """Records primitive operations while used as a context manager.

    >>> w = Parameter([[1.0, 2.0]])
    >>> with GradientTape() as tape:
    ...     loss = sum_all(w)
    >>> backward(loss, tape)[w].tolist()
    [[1.0, 1.0]]
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._params: dict[int, Parameter] = {}
        self._reached: dict[int, Parameter] = {}
        self._tracked: set[int] = set()
        self._keep: list[Matrix] = []

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *params: Parameter) -> None:
        for p in params:
            if not isinstance(p, Parameter):
                raise ContractError("only Parameter leaves can be watched")
            self._params.setdefault(id(p), p)

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    @property
    def reached(self) -> list[Parameter]:
        """Parameters that fed at least one recorded operation."""
        return list(self._reached.values())

    def is_tracked(self, m: Matrix) -> bool:
        return m.trainable or id(m) in self._tracked

    def _record(self, out: Matrix, inputs: Sequence[Matrix], vjp) -> None:
        if not any(self.is_tracked(m) for m in inputs):
            return
        for m in inputs:
            if m.trainable:
                self._params.setdefault(id(m), m)
                self._reached.setdefault(id(m), m)
        self._tracked.add(id(out))
        self._keep.append(out)
        self.nodes.append(_Node(out, tuple(inputs), vjp))


def _emit(arr: np.ndarray, inputs: Sequence[Matrix], vjp) -> Matrix:
    out = Matrix._wrap(arr)
    for tape in _TAPES:
        tape._record(out, inputs, vjp)
    return out


def backward(loss: Matrix, tape: GradientTape) -> dict[Parameter, Matrix]:
    """Gradients of a 1x1 ``loss`` for every parameter known to ``tape``.

    Parameters that were watched but never reached get an exact zero matrix.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar, got {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if tape.is_tracked(loss):
        grads[id(loss)] = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for p in tape.parameters:
        g = grads.get(id(p))
        out[p] = Matrix._wrap(np.array(g, dtype=np.float64)) if g is not None else Matrix._wrap(np.zeros(p.shape))
    return out


@contextlib.contextmanager
def count_ops():
    """Yield a Counter of matmul-like primitive invocations inside the block."""
    start = OP_COUNTS.copy()
    c = Counter()
    try:
        yield c
    finally:
        c.update(OP_COUNTS)
        c.subtract(start)


# -- primitives ------------------------------------------------------------

def _check_same(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _needs_grad(m: Matrix) -> bool:
    return m.trainable or any(id(m) in t._tracked for t in _TAPES)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    OP_COUNTS["matmul"] += 1
    A, B = a.data, b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)
    return _emit(A @ B, (a, b), lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None))


def add(a: Matrix, b: Matrix) -> Matrix:
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(terms: Sequence[Matrix]) -> Matrix:
    if not terms:
        raise ShapeError("add_n needs at least one term")
    for t in terms[1:]:
        _check_same(terms[0], t, "add_n")
    acc = terms[0].data.copy()
    for t in terms[1:]:
        acc += t.data
    return _emit(acc, tuple(terms), lambda g: (g,) * len(terms))


def add_bias(x: Matrix, bias: Matrix) -> Matrix:
    """Add a 1 x cols row vector to every row of ``x``."""
    if bias.shape != (1, x.cols):
        raise ShapeError(f"add_bias: bias {bias.shape} for input {x.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x: Matrix, c: float) -> Matrix:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def scale_by(x: Matrix, s: Matrix, c: float = 1.0) -> Matrix:
    """``c * s * x`` for a 1x1 matrix ``s`` and constant ``c``."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale_by: scalar must be 1x1, got {s.shape}")
    X, sv, c = x.data, s.data[0, 0], float(c)
    return _emit(X * (c * sv), (x, s),
                 lambda g: (g * (c * sv), np.array([[c * np.sum(g * X)]])))


def scale_cols(x: Matrix, s: Matrix, c: float = 1.0) -> Matrix:
    """Multiply column j of ``x`` by ``c * s[0, j]``."""
    if s.shape != (1, x.cols):
        raise ShapeError(f"scale_cols: scales {s.shape} for input {x.shape}")
    X, S, c = x.data, s.data, float(c)
    return _emit(X * (c * S), (x, s),
                 lambda g: (g * (c * S), c * np.sum(g * X, axis=0, keepdims=True)))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _check_same(a, b, "hadamard")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def mul_const(x: Matrix, m: np.ndarray) -> Matrix:
    """Elementwise product with a constant array of the same shape."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"mul_const: {m.shape} vs {x.shape}")
    return _emit(x.data * m, (x,), lambda g: (g * m,))


def sum_all(x: Matrix) -> Matrix:
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def layer_norm(x: Matrix, gamma: Matrix, beta: Matrix, eps: float = 1e-6) -> Matrix:
    """Row-wise layer normalisation with a 1 x cols affine."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError("layer_norm: affine must be 1 x cols")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def vjp(g):
        gx = g * G
        n = X.shape[1]
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n)
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * G + beta.data, (x, gamma, beta), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Matrix) -> Matrix:
    """tanh-approximated GELU."""
    X = x.data
    X2 = X * X
    t = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _emit(0.5 * X * (1.0 + t), (x,), vjp)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(x: Matrix) -> Matrix:
    P = _softmax(x.data)
    return _emit(P, (x,), lambda g: (P * (g - (g * P).sum(axis=1, keepdims=True)),))


def attention(qkv: Matrix, batch: int, tokens: int, heads: int) -> Matrix:
    """Multi-head softmax self-attention on a fused (batch*tokens) x 3d input.

    Columns are laid out as [q | k | v], each d wide and split into
    ``heads`` contiguous head slices. Returns (batch*tokens) x d.
    """
    n, w = qkv.shape
    if n != batch * tokens or w % 3 or (w // 3) % heads:
        raise ShapeError(f"attention: input {qkv.shape} for batch={batch} tokens={tokens} heads={heads}")
    d = w // 3
    dh = d // heads
    OP_COUNTS["matmul"] += 2
    X = qkv.data.reshape(batch, tokens, 3, heads, dh)
    q = X[:, :, 0].transpose(0, 2, 1, 3)  # b h t dh
    k = X[:, :, 1].transpose(0, 2, 1, 3)
    v = X[:, :, 2].transpose(0, 2, 1, 3)
    s = 1.0 / np.sqrt(dh)
    P = _softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * s)
    O = np.matmul(P, v)
    out = O.transpose(0, 2, 1, 3).reshape(n, d)

    def vjp(g):
        dO = g.reshape(batch, tokens, heads, dh).transpose(0, 2, 1, 3)
        dv = np.matmul(P.transpose(0, 1, 3, 2), dO)
        dP = np.matmul(dO, v.transpose(0, 1, 3, 2))
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * s
        dq = np.matmul(dS, k)
        dk = np.matmul(dS.transpose(0, 1, 3, 2), q)
        full = np.stack([dq, dk, dv], axis=2)  # b h 3 t dh
        return (full.transpose(0, 3, 2, 1, 4).reshape(n, w),)

    return _emit(out, (qkv,), vjp)


def mean_pool(x: Matrix, batch: int, tokens: int) -> Matrix:
    """Average consecutive groups of ``tokens`` rows: (batch*tokens) x d -> batch x d."""
    if x.rows != batch * tokens:
        raise ShapeError(f"mean_pool: {x.rows} rows for batch={batch} tokens={tokens}")
    d = x.cols
    out = x.data.reshape(batch, tokens, d).mean(axis=1)
    return _emit(out, (x,), lambda g: (np.repeat(g / tokens, tokens, axis=0),))


def cross_entropy(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (logits.rows,):
        raise ShapeError(f"cross_entropy: {y.shape[0] if y.ndim else 0} labels for {logits.rows} rows")
    if y.size and (y.min() < 0 or y.max() >= logits.cols):
        raise ShapeError("cross_entropy: label out of range")
    Z = logits.data
    zmax = Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True)) + zmax
    rows = np.arange(len(y))
    loss = float(np.mean(lse[:, 0] - Z[rows, y]))

    def vjp(g):
        P = np.exp(Z - lse)
        P[rows, y] -= 1.0
        return (P * (g[0, 0] / len(y)),)

    return _emit(np.array([[loss]]), (logits,), vjp)


# -- random streams ----------------------------------------------------------

def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ParameterError("stream path indices must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def _seed_sequence(seed: int, path: Iterable) -> np.random.SeedSequence:
    if int(seed) < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def stream(seed: int, *path) -> np.random.Generator:
    """Independent Philox generator addressed by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, path)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for the substream ``(seed, *path)``."""
    lo, hi = _seed_sequence(seed, path).generate_state(2, np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)


def gaussian_init(rows: int, cols: int, std: float, seed: int) -> Matrix:
    """i.i.d. N(0, std^2) entries drawn from ``stream(seed)``."""
    if std <= 0:
        raise ParameterError(f"std must be positive, got {std}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"invalid shape {rows}x{cols}")
    return Matrix._wrap(stream(seed).normal(0.0, std, size=(rows, cols)))


# -- gradient checking ---------------------------------------------------------

def finite_diff_check(fn: Callable[..., Matrix], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*params)`` must return a 1x1 Matrix and be deterministic; two
    evaluations at the same point that differ raise ContractError.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with GradientTape() as tape:
        tape.watch(*params)
        loss = fn(*params)
    grads = backward(loss, tape)
    base = loss.item()
    if fn(*params).item() != base or fn(*params).item() != base:
        raise ContractError("fn is not deterministic: repeated evaluation differs")

    worst = 0.0
    for p in params:
        orig = p.data.copy()
        analytic = grads[p].data
        for idx in np.ndindex(orig.shape):
            bumped = orig.copy()
            bumped[idx] = orig[idx] + eps
            p.assign(bumped)
            fp = fn(*params).item()
            bumped[idx] = orig[idx] - eps
            p.assign(bumped)
            fm = fn(*params).item()
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[idx] - fd) / (abs(fd) + 1e-12))
        p.assign(orig)
    return worst
