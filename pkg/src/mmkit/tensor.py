"""Dense float64 tensors with reverse-mode autodiff recorded on a global tape.

Every numeric quantity in the kit lives in a `Tensor`: a row-major float64
numpy array plus a `requires_grad` flag and a lazily populated `grad` buffer.
Operations that touch at least one gradient-tracked input append a backward
rule to the active `ComputationTape`; `backward()` replays the tape in exact
reverse order and accumulates gradients additively, so a weight reused at
many sequence positions receives the sum of all its contributions.

The op set is deliberately small: exactly what low-rank adapters, the patch
tower, and a causal decoder need. There is no general broadcasting and no
dtype other than float64, which keeps central-difference verification tight.
"""

from __future__ import annotations

import contextlib
import hashlib
import math

import numpy as np

from .errors import ContractError, EmptyLossError, ShapeError

LAYER_NORM_EPS = 1e-5
GELU_CUBIC_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    """Row-major float64 array with optional gradient tracking.

    Tensors are immutable once created, except for `grad`, which is written
    only during a backward pass, and leaf `data` buffers, which the optimizer
    and the finite-difference prober update in place between passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar for the common cases; the named functions below are the API.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))


class _TapeEntry:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class ComputationTape:
    """Ordered record of every gradient-relevant operation since the last clear."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        """Drop all recorded operations and the references they hold."""
        self.entries.clear()

    def truncate(self, length: int) -> None:
        del self.entries[length:]


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def active_tape() -> ComputationTape:
    return _TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for probes and eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def record_op(out_data, inputs, grad_fn) -> Tensor:
    """Wrap an op result, recording `grad_fn` when any input tracks gradients.

    `grad_fn` maps the output gradient array to a tuple of input gradient
    arrays (or None for inputs that need none), aligned with `inputs`.
    """
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        _TAPE.entries.append(_TapeEntry(out, tuple(inputs), grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Replays the active tape in exact reverse recording order. Entries whose
    outputs do not feed `loss` are skipped. Gradients accumulate additively,
    both across multiple uses within one pass and across repeated backward
    calls (callers zero grads between optimization steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for entry in reversed(_TAPE.entries):
        g = flows.pop(id(entry.out), None)
        if g is None:
            continue
        grads = entry.grad_fn(g)
        for t, ig in zip(entry.inputs, grads):
            if ig is None or not t.requires_grad:
                continue
            acc = flows.get(id(t))
            flows[id(t)] = ig if acc is None else acc + ig
            if t.grad is None:
                t.grad = np.array(flows[id(t)], copy=True)
            else:
                t.grad = t.grad + ig
    flows.clear()


# ---------------------------------------------------------------------------
# constructors


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def gaussian(shape, std: float, rng: np.random.Generator, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g if na else None, g if nb else None)

    return record_op(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g if na else None, -g if nb else None)

    return record_op(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g * bd if na else None, g * ad if nb else None)

    return record_op(ad * bd, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return record_op(a.data * c, (a,), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an (m, n) tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias needs (m,n) plus (n,), got {x.shape} and {b.shape}")
    nx, nb = x.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g if nx else None, g.sum(axis=0) if nb else None)

    return record_op(x.data + b.data[None, :], (x, b), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        return (np.full(shape, float(g)),)

    return record_op(np.asarray(x.data.sum()), (x,), grad_fn)


def sin(x: Tensor) -> Tensor:
    xd = x.data

    def grad_fn(g):
        return (g * np.cos(xd),)

    return record_op(np.sin(xd), (x,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return record_op(ad @ bd, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got shape {x.shape}")

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return record_op(x.data.T, (x,), grad_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] invalid for shape {x.shape}")
    full = x.shape

    def grad_fn(g):
        gx = np.zeros(full)
        gx[start:stop] = g
        return (gx,)

    return record_op(x.data[start:stop].copy(), (x,), grad_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] invalid for shape {x.shape}")
    full = x.shape

    def grad_fn(g):
        gx = np.zeros(full)
        gx[:, start:stop] = g
        return (gx,)

    return record_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), grad_fn)


def _concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat needs at least one part")
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat needs 2-d parts, got shape {p.shape}")
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)
    needs = [p.requires_grad for p in parts]

    def grad_fn(g):
        out = []
        for p, need, lo, hi in zip(parts, needs, offsets[:-1], offsets[1:]):
            if not need:
                out.append(None)
            elif axis == 0:
                out.append(g[lo:hi])
            else:
                out.append(np.ascontiguousarray(g[:, lo:hi]))
        return tuple(out)

    return record_op(np.concatenate([p.data for p in parts], axis=axis), parts, grad_fn)


def concat_rows(parts) -> Tensor:
    return _concat(parts, axis=0)


def concat_cols(parts) -> Tensor:
    return _concat(parts, axis=1)


def embedding_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` at integer `ids`; scatter-adds on backward."""
    ids = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding needs 2-d table and 1-d ids, got {table.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")
    need = table.requires_grad
    full = table.shape

    def grad_fn(g):
        if not need:
            return (None,)
        gt = np.zeros(full)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(table.data[ids], (table,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the same function the FD oracle probes)."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + GELU_CUBIC_COEF * (xd * xd * xd))
    t = np.tanh(inner)

    def grad_fn(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * (xd * xd))
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return record_op(0.5 * xd * (1.0 + t), (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with row-max subtraction; each output row sums to 1."""
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs a 2-d tensor with columns, got shape {x.shape}")
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record_op(y, (x,), grad_fn)


_TRIL_CACHE: dict[int, np.ndarray] = {}


def _tril_mask(n: int) -> np.ndarray:
    mask = _TRIL_CACHE.get(n)
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
        mask.flags.writeable = False
        _TRIL_CACHE[n] = mask
    return mask


def causal_shift(x: Tensor) -> Tensor:
    """Set entries above the diagonal to -inf so softmax zeroes them exactly."""
    xd = x.data
    if xd.ndim != 2 or xd.shape[0] != xd.shape[1]:
        raise ShapeError(f"causal_shift needs a square tensor, got shape {x.shape}")
    keep = _tril_mask(xd.shape[0])

    def grad_fn(g):
        return (np.where(keep, g, 0.0),)

    return record_op(np.where(keep, xd, -np.inf), (x,), grad_fn)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row layer norm with learnable gain and bias vectors."""
    xd = x.data
    if xd.ndim != 2 or gain.shape != (xd.shape[1],) or bias.shape != (xd.shape[1],):
        raise ShapeError(
            f"layer_norm shapes inconsistent: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data
    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad

    def grad_fn(g):
        gxhat = g * gd[None, :]
        gx = None
        if nx:
            m1 = gxhat.mean(axis=1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        return (
            gx,
            (g * xhat).sum(axis=0) if ng else None,
            g.sum(axis=0) if nb else None,
        )

    return record_op(xhat * gd[None, :] + bias.data[None, :], (x, gain, bias), grad_fn)


def masked_cross_entropy(logits: Tensor, targets, row_mask) -> Tensor:
    """Mean cross-entropy over rows where `row_mask` is true.

    `targets` holds the class index per row; rows outside the mask are
    ignored and receive zero gradient.
    """
    ld = logits.data
    targets = np.asarray(targets, dtype=np.intp)
    row_mask = np.asarray(row_mask, dtype=bool)
    if ld.ndim != 2 or targets.shape != (ld.shape[0],) or row_mask.shape != (ld.shape[0],):
        raise ShapeError(
            f"masked CE shapes inconsistent: logits {logits.shape}, "
            f"targets {targets.shape}, mask {row_mask.shape}"
        )
    rows = np.flatnonzero(row_mask)
    if rows.size == 0:
        raise EmptyLossError("cross-entropy requested with no supervised positions")
    picked = ld[rows]
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= ld.shape[1]:
        raise ShapeError(f"targets out of range for {ld.shape[1]} classes")
    shifted = picked - picked.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(rows.size), tgt].mean()
    probs = np.exp(logp)

    def grad_fn(g):
        grad_rows = probs.copy()
        grad_rows[np.arange(rows.size), tgt] -= 1.0
        out = np.zeros(ld.shape)
        out[rows] = grad_rows * (float(g) / rows.size)
        return (out,)

    return record_op(np.asarray(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# hashing


def content_hash(named: dict[str, Tensor]) -> str:
    """Order-independent SHA-256 digest of named tensor contents."""
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(np.ascontiguousarray(named[name].data).tobytes())
    return h.hexdigest()
