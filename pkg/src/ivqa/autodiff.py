"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Every piece of model math in this package is built from the primitives here:
matrix products, elementwise arithmetic, activations, softmax, concatenation,
sum-pooling, the two bilinear-fusion normalizations, and embedding lookup.
Operations record themselves define-by-run onto the thread's active ``Tape``;
``backward()`` replays the tape once in reverse, accumulating gradients
additively across fan-out.  ``grad_check()`` is the central-difference oracle
used throughout the test suite to validate every backward rule.

Precision is uniform per run: 32-bit by default (training speed), 64-bit for
gradient checking.  Any forward operation that produces NaN/Inf from finite
inputs raises ``NonFiniteError`` instead of propagating silent corruption.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "set_precision",
    "precision_bits",
    "precision",
    "matmul",
    "ewise",
    "activation",
    "softmax",
    "concat",
    "stack",
    "sum_pool",
    "signed_sqrt",
    "l2_normalize",
    "embed_lookup",
    "affine",
    "log",
    "clamp_min",
    "pick",
    "tsum",
    "backward",
    "grad_check",
    "zero_grads",
    "SIGNED_SQRT_EPS",
    "L2_NORM_EPS",
]

# Backward stabilizer for signed_sqrt and the zero-vector guard for
# l2_normalize; both keep gradients finite where the true derivative blows up.
SIGNED_SQRT_EPS = 1e-8
L2_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    """Tape misuse: backward twice, stale tape, or nested tapes."""


# Tape and precision are confined to the creating thread; frozen tensors
# (no tape attachment) may be shared across threads freely.
_tls = threading.local()


def _dtype() -> type:
    return getattr(_tls, "dtype", np.float32)


def set_precision(bits: int) -> None:
    """Select the uniform floating-point width (32 or 64) for this thread."""
    if bits == 32:
        _tls.dtype = np.float32
    elif bits == 64:
        _tls.dtype = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")


def precision_bits() -> int:
    return 64 if _dtype() is np.float64 else 32


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch precision; restores the previous mode on exit."""
    old = precision_bits()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tensor:
    """A dense row-major array that may participate in gradient recording.

    ``values`` is always a C-contiguous ndarray in the run's precision.
    ``grad`` is populated by ``backward()`` and accumulates additively until
    cleared, which is what batch-gradient accumulation relies on.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=_dtype(), order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of one forward pass.

    Records are appended in creation order, which is automatically a
    topological order under define-by-run.  A tape supports exactly one
    backward pass; rebuild a fresh tape for every forward pass.
    """

    __slots__ = ("_records", "_spent")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)


def _result(
    values: np.ndarray,
    inputs: tuple[Tensor, ...],
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op output: finite check, grad propagation, tape recording."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("operation produced non-finite values (overflow?)")
    out = Tensor._wrap(values, any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        if tape._spent:
            raise TapeError("tape already consumed by backward(); start a new forward pass")
        out._tape = tape
        tape._records.append((out, inputs, rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from ``loss``.

    The loss must be a scalar produced under a live tape; gradients of
    tensors used in several branches are summed.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active tape")
    if tape._spent:
        raise TapeError("backward() already ran for this tape")
    tape._spent = True
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for out, inputs, rule in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        grads = rule(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's 1-D promotion rules.

    2-D @ 2-D is the standard (m,n)@(n,p); a 1-D operand acts as a row/column
    vector and the unit axis is dropped from the result, so (m,n)@(n,) -> (m,),
    (k,)@(k,p) -> (p,), and (n,)@(n,) is the dot product (scalar output).
    """
    av, bv = a.values, b.values
    if not (1 <= av.ndim <= 2 and 1 <= bv.ndim <= 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(av @ bv)  # asarray keeps the 0-d result of a dot product
    an, bn = av.ndim, bv.ndim

    def rule(g, av=av, bv=bv, an=an, bn=bn):
        if an == 2 and bn == 2:
            return g @ bv.T, av.T @ g
        if an == 2 and bn == 1:
            return np.outer(g, bv), av.T @ g
        if an == 1 and bn == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # dot product; g is 0-d

    return _result(out, (a, b), rule)


def ewise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise sum ("add") or Hadamard product ("hadamard")."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"ewise operand shapes differ: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        if kind == "add":
            return _result(a.values + b.values, (a, b), lambda g: (g, g))
        if kind == "hadamard":
            av, bv = a.values, b.values
            return _result(av * bv, (a, b), lambda g, av=av, bv=bv: (g * bv, g * av))
    raise ValueError(f"unknown ewise kind {kind!r}")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # branch on sign so neither exp() overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _tanh_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * (1.0 - y * y)


def _sigmoid_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise tanh or sigmoid."""
    if kind == "tanh":
        y = np.tanh(a.values)
        return _result(y, (a,), lambda g, y=y: (_tanh_backward(g, y),))
    if kind == "sigmoid":
        y = _sigmoid_values(a.values)
        return _result(y, (a,), lambda g, y=y: (_sigmoid_backward(g, y),))
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax(a: Tensor) -> Tensor:
    """Probability vector over a 1-D input, computed with max-subtraction."""
    v = a.values
    if v.ndim != 1 or v.size < 1:
        raise ShapeError(f"softmax expects a non-empty 1-D tensor, got shape {a.shape}")
    e = np.exp(v - v.max())
    y = e / e.sum()

    def rule(g, y=y):
        return (y * (g - float(g @ y)),)

    return _result(y, (a,), rule)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors; the gradient splits back into the parts."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    for p in parts:
        if p.values.ndim != 1:
            raise ShapeError(f"concat expects 1-D parts, got shape {p.shape}")
    out = np.concatenate([p.values for p in parts])
    sizes = tuple(p.values.size for p in parts)

    def rule(g, sizes=sizes):
        grads, off = [], 0
        for s in sizes:
            grads.append(g[off : off + s])
            off += s
        return grads

    return _result(out, parts, rule)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a 2-D (k, n) tensor."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack of an empty sequence")
    n = parts[0].values.size
    for p in parts:
        if p.values.ndim != 1 or p.values.size != n:
            raise ShapeError("stack expects 1-D parts of equal length")
    out = np.stack([p.values for p in parts])

    def rule(g, k=len(parts)):
        return [g[i] for i in range(k)]

    return _result(out, parts, rule)


def sum_pool(a: Tensor, window: int) -> Tensor:
    """Non-overlapping block sums of a 1-D tensor; window must divide length."""
    v = a.values
    if v.ndim != 1:
        raise ShapeError(f"sum_pool expects a 1-D tensor, got shape {a.shape}")
    if window < 1 or v.size % window != 0:
        raise ShapeError(f"window {window} does not divide length {v.size}")
    out = v.reshape(-1, window).sum(axis=1)

    def rule(g, window=window):
        return (np.repeat(g, window),)

    return _result(out, (a,), rule)


def signed_sqrt(a: Tensor) -> Tensor:
    """sign(x) * sqrt(|x|); backward uses 1/(2*sqrt(|x|) + eps) to stay finite at 0."""
    v = a.values
    root = np.sqrt(np.abs(v))
    out = np.sign(v) * root

    def rule(g, root=root):
        return (g / (2.0 * root + SIGNED_SQRT_EPS),)

    return _result(out, (a,), rule)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale a 1-D tensor to unit L2 norm; vectors below the guard pass through."""
    v = a.values
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a 1-D tensor, got shape {a.shape}")
    n = float(np.linalg.norm(v))
    if n < L2_NORM_EPS:
        return _result(v.copy(), (a,), lambda g: (g,))
    y = v / n

    def rule(g, y=y, n=n):
        return ((g - y * float(g @ y)) / n,)

    return _result(y, (a,), rule)


def embed_lookup(table: Tensor, index: int) -> Tensor:
    """Select row ``index`` of a 2-D table; gradient flows only into that row."""
    tv = table.values
    if tv.ndim != 2:
        raise ShapeError(f"embed_lookup expects a 2-D table, got shape {table.shape}")
    index = int(index)
    if not 0 <= index < tv.shape[0]:
        raise IndexError(f"embedding index {index} out of range [0, {tv.shape[0]})")
    out = tv[index].copy()

    def rule(g, shape=tv.shape, dt=tv.dtype, index=index):
        gt = np.zeros(shape, dtype=dt)
        gt[index] = g
        return (gt,)

    return _result(out, (table,), rule)


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise scale*a + shift with python-float coefficients."""
    out = a.values * scale + shift
    return _result(out, (a,), lambda g, scale=scale: (g * scale,))


def log(a: Tensor) -> Tensor:
    """Natural logarithm; inputs must be strictly positive."""
    v = a.values
    if np.any(v <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(v), (a,), lambda g, v=v: (g / v,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; clamped positions get zero gradient."""
    v = a.values
    out = np.maximum(v, floor)
    mask = (v > floor).astype(v.dtype)
    return _result(out, (a,), lambda g, mask=mask: (g * mask,))


def pick(a: Tensor, index: int) -> Tensor:
    """Scalar element a[index] of a 1-D tensor."""
    v = a.values
    if v.ndim != 1:
        raise ShapeError(f"pick expects a 1-D tensor, got shape {a.shape}")
    index = int(index)
    if not 0 <= index < v.size:
        raise IndexError(f"pick index {index} out of range [0, {v.size})")
    out = np.asarray(v[index], dtype=v.dtype)

    def rule(g, n=v.size, dt=v.dtype, index=index):
        gv = np.zeros(n, dtype=dt)
        gv[index] = g
        return (gv,)

    return _result(out, (a,), rule)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.values.sum(), dtype=a.values.dtype)

    def rule(g, shape=a.values.shape, dt=a.values.dtype):
        return (np.full(shape, g, dtype=dt),)

    return _result(out, (a,), rule)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient at x and central differences.

    ``f`` must be scalar-valued and is evaluated fresh per perturbation, so it
    must be a pure function of x (and of anything it closes over).  Relative
    error per coordinate is |a-n| / max(|a|, |n|, 1e-8).  Requires the 64-bit
    precision mode; in 32-bit the differences drown in rounding noise.
    """
    if precision_bits() != 64:
        raise ValueError("grad_check requires the 64-bit precision mode")
    if x.values.size == 0:
        return 0.0
    x.grad = None
    with Tape():
        y = f(x)
    if y.values.shape != ():
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.values)).reshape(-1).copy()

    flat = x.values.reshape(-1)  # view; perturbed in place
    numeric = np.zeros_like(analytic)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x).values)
        flat[i] = keep - h
        fm = float(f(x).values)
        flat[i] = keep
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
