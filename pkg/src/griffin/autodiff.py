"""Tape-based reverse-mode differentiation over dense float64 matrices.

All model arithmetic runs through the ops in this module. Every op computes
its result eagerly with numpy and, while a :class:`Tape` is active on the
current thread, records a closure that propagates adjoints back to its
inputs. Gradients accumulate on the :class:`Tensor` objects themselves;
:class:`ParamStore` pre-fills its tensors with zero gradients so parameters
untouched by a forward pass report exact zeros after ``backward``.

Values are plain 2-D float64 numpy arrays. Scalars are represented as
(1, 1) matrices. Tensors are treated as immutable once returned from an op.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ParamStore",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "scalar_mul",
    "relu",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "mean_all",
    "sum_all",
    "hstack",
    "col_slice",
    "permute_rows",
    "block_mean_rows",
    "block_matmul_nt",
    "block_matmul_nn",
    "backward",
    "finite_diff_check",
]

_TLS = threading.local()


def active_tape() -> "Tape | None":
    """Tape currently recording on this thread, if any."""
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Use as a context manager; only one tape may be active per thread.
    ``backward`` replays the recorded ops in exact reverse order and then
    marks the tape consumed.
    """

    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("another tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _TLS.tape = None

    def record(self, op: Callable[[], None]) -> None:
        self._ops.append(op)

    def clear(self) -> None:
        """Drop every recorded op; a later backward then yields zero gradients."""
        self._ops.clear()
        self._consumed = False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._ops)


class Tensor:
    """A 2-D float64 value with a gradient slot; node of the autodiff graph."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: Tape | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ValueError(f"Tensor requires a 2-D array, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ValueError(f"item() requires a scalar (1, 1) tensor, got {self.shape}")
        return float(self.value[0, 0])

    def accumulate(self, g: np.ndarray) -> None:
        # First contribution copies so later in-place adds never alias the
        # adjoint buffer of a downstream node.
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))


def constant(value) -> Tensor:
    """Wrap an array as a leaf tensor that never receives useful gradients."""
    return Tensor(value)


def _out(value: np.ndarray) -> Tensor:
    return Tensor(value, tape=active_tape())


def _record(fn: Callable[[], None]) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(fn)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ValueError(f"matmul: cannot multiply shapes {a.shape} x {b.shape}")
    out = _out(a.value @ b.value)
    av, bv = a.value, b.value

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(g @ bv.T)
        b.accumulate(av.T @ g)

    _record(_bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a (1, cols) row broadcast over a's rows."""
    broadcast = b.shape == (1, a.cols) and a.rows != 1
    if not broadcast and a.shape != b.shape:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.value + b.value)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(g)
        b.accumulate(g.sum(axis=0, keepdims=True) if broadcast else g)

    _record(_bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.value - b.value)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(g)
        b.accumulate(-g)

    _record(_bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = _out(a.value * b.value)
    av, bv = a.value, b.value

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(g * bv)
        b.accumulate(g * av)

    _record(_bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant."""
    out = _out(a.value * c)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(g * c)

    _record(_bw)
    return out


def scalar_mul(s: Tensor, const: np.ndarray) -> Tensor:
    """Learnable (1, 1) scalar times a constant matrix."""
    if s.shape != (1, 1):
        raise ValueError(f"scalar_mul: scalar must have shape (1, 1), got {s.shape}")
    c = np.asarray(const, dtype=np.float64)
    out = _out(s.value[0, 0] * c)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        s.accumulate(np.array([[np.sum(g * c)]]))

    _record(_bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.value, 0.0))
    mask = x.value > 0.0

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(g * mask)

    _record(_bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # Branch on sign to avoid overflow in exp for large |x|.
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = _out(s)
    sv = out.value

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(g * sv * (1.0 - sv))

    _record(_bw)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if a.value.size == 0:
        raise ValueError("softmax_rows: input must be non-empty")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _out(p)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        a.accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    _record(_bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row (population variance, eps-stabilized), then affine."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ValueError(
            f"layer_norm: gamma/beta must have shape (1, {x.cols}), "
            f"got {gamma.shape} and {beta.shape}"
        )
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = _out(xhat * gamma.value + beta.value)
    gv = gamma.value

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        beta.accumulate(g.sum(axis=0, keepdims=True))
        gamma.accumulate((g * xhat).sum(axis=0, keepdims=True))
        gx = g * gv
        x.accumulate(
            inv
            * (
                gx
                - gx.mean(axis=1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            )
        )

    _record(_bw)
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time masking scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode requires a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _out(x.value * mask)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(g * mask)

    _record(_bw)
    return out


def mean_all(x: Tensor) -> Tensor:
    out = _out(np.array([[x.value.mean()]]))
    n = x.value.size

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(np.full(x.shape, g[0, 0] / n))

    _record(_bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.array([[x.value.sum()]]))

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(np.full(x.shape, g[0, 0]))

    _record(_bw)
    return out


def hstack(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along columns."""
    if not parts:
        raise ValueError("hstack: need at least one tensor")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ValueError("hstack: all tensors must share the same number of rows")
    out = _out(np.hstack([p.value for p in parts]))
    edges = np.cumsum([0] + [p.cols for p in parts])

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        for p, c0, c1 in zip(parts, edges[:-1], edges[1:]):
            p.accumulate(g[:, c0:c1])

    _record(_bw)
    return out


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice [start, stop)."""
    if not 0 <= start < stop <= x.cols:
        raise ValueError(f"col_slice: invalid range [{start}, {stop}) for {x.cols} columns")
    out = _out(x.value[:, start:stop].copy())

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        pad = np.zeros(x.shape)
        pad[:, start:stop] = g
        x.accumulate(pad)

    _record(_bw)
    return out


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder rows by a permutation index array."""
    perm = np.asarray(perm)
    if perm.shape != (x.rows,):
        raise ValueError(f"permute_rows: permutation length {perm.shape} != rows {x.rows}")
    out = _out(x.value[perm])
    inv = np.argsort(perm)

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(g[inv])

    _record(_bw)
    return out


def block_mean_rows(x: Tensor, block: int) -> Tensor:
    """Mean over each consecutive block of rows: (B*block, d) -> (B, d)."""
    if block < 1 or x.rows % block != 0:
        raise ValueError(f"block_mean_rows: {x.rows} rows not divisible into blocks of {block}")
    b = x.rows // block
    out = _out(x.value.reshape(b, block, x.cols).mean(axis=1))

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        x.accumulate(np.repeat(g, block, axis=0) / block)

    _record(_bw)
    return out


def block_matmul_nt(a: Tensor, b: Tensor, block_a: int, block_b: int) -> Tensor:
    """Per-block A_i @ B_i^T for row-blocked inputs sharing a feature axis.

    a is (B*block_a, d) and b is (B*block_b, d); the result stacks the
    per-block (block_a, block_b) products into (B*block_a, block_b).
    """
    if a.cols != b.cols:
        raise ValueError(f"block_matmul_nt: feature widths differ: {a.shape} vs {b.shape}")
    if a.rows % block_a != 0 or b.rows % block_b != 0:
        raise ValueError("block_matmul_nt: rows not divisible by block size")
    nb = a.rows // block_a
    if b.rows // block_b != nb:
        raise ValueError("block_matmul_nt: inputs disagree on block count")
    a3 = a.value.reshape(nb, block_a, a.cols)
    b3 = b.value.reshape(nb, block_b, b.cols)
    out = _out(np.matmul(a3, b3.transpose(0, 2, 1)).reshape(nb * block_a, block_b))

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        g3 = g.reshape(nb, block_a, block_b)
        a.accumulate(np.matmul(g3, b3).reshape(a.shape))
        b.accumulate(np.matmul(g3.transpose(0, 2, 1), a3).reshape(b.shape))

    _record(_bw)
    return out


def block_matmul_nn(w: Tensor, v: Tensor, block_w: int) -> Tensor:
    """Per-block W_i @ V_i with W blocks (block_w, L) and V blocks (L, d)."""
    if w.rows % block_w != 0:
        raise ValueError("block_matmul_nn: rows not divisible by block size")
    nb = w.rows // block_w
    length = w.cols
    if v.rows != nb * length:
        raise ValueError(
            f"block_matmul_nn: value rows {v.rows} != blocks {nb} x width {length}"
        )
    w3 = w.value.reshape(nb, block_w, length)
    v3 = v.value.reshape(nb, length, v.cols)
    out = _out(np.matmul(w3, v3).reshape(nb * block_w, v.cols))

    def _bw() -> None:
        g = out.grad
        if g is None:
            return
        g3 = g.reshape(nb, block_w, v.cols)
        w.accumulate(np.matmul(g3, v3.transpose(0, 2, 1)).reshape(w.shape))
        v.accumulate(np.matmul(w3.transpose(0, 2, 1), g3).reshape(v.shape))

    _record(_bw)
    return out


# ---------------------------------------------------------------------------
# parameters and gradient propagation
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with gradient accumulators.

    Iteration is sorted by name so optimizer sweeps and serialization stay
    deterministic. Parameters excluded from weight decay (biases, norm
    scales) are flagged at registration time.
    """

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._no_decay: set[str] = set()

    def add(self, name: str, value, decay: bool = True) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64))
        self._tensors[name] = t
        if not decay:
            self._no_decay.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._tensors[name]

    def decays(self, name: str) -> bool:
        return name not in self._no_decay

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.value)

    def num_values(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(values)
        extra = set(values) - set(self._tensors)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            t = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.value.shape:
                raise ValueError(
                    f"shape mismatch for parameter {name}: expected {t.value.shape}, got {arr.shape}"
                )
            t.value = arr.copy()

    def grad_global_norm(self) -> float:
        total = 0.0
        for _, t in self.items():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))


def backward(tape: Tape, output: Tensor) -> None:
    """Replay the tape in reverse, accumulating d(output)/d(input) everywhere.

    ``output`` must be a scalar produced while ``tape`` was active. The tape
    is single-use: a second backward raises.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if output.tape is not tape:
        raise ValueError("backward: output was not produced under this tape")
    if output.shape != (1, 1):
        raise ValueError(f"backward: output must be scalar (1, 1), got {output.shape}")
    output.grad = np.ones((1, 1))
    for op in reversed(tape._ops):
        op()
    tape._consumed = True


def finite_diff_check(
    fn: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map the parameter store to a scalar tensor using the ops in
    this module. The analytic side runs once under a fresh tape; the numeric
    side perturbs every parameter coordinate by +/- h. The error at one
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|); the
    maximum over all coordinates is returned (0.0 for an empty store).
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")

    def _eval() -> float:
        value = fn(params).item()
        if not np.isfinite(value):
            raise ValueError("finite_diff_check: fn returned a non-finite value")
        return value

    params.zero_grad()
    with Tape() as tape:
        out = fn(params)
    if not np.isfinite(out.item()):
        raise ValueError("finite_diff_check: fn returned a non-finite value")
    backward(tape, out)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _eval()
            flat[i] = orig - h
            f_minus = _eval()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
            worst = max(worst, err)
    return worst
