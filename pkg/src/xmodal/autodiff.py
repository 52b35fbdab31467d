"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Everything is 64-bit: the gradient-cosine diagnostics and the finite-difference
oracles need the headroom, and speed is not a goal at this scale. Broadcasting
is restricted to numpy's trailing-dimension rule; adjoints un-broadcast by
summing over expanded axes.
"""

from __future__ import annotations

import threading

import numpy as np

RMSNORM_EPS = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class TapeError(RuntimeError):
    """Tape misuse: backward without a tape, or repeated backward."""


class EmptyLossError(ValueError):
    """A loss was requested over zero unmasked positions."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Non-leaf tensors remember the tape that recorded them so ``backward``
    can find the op record list. ``grad`` is a plain ndarray of the same
    shape, populated by ``backward`` for every tensor with requires_grad.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        # never mutate in place: the incoming array may be a view of another
        # tensor's grad buffer (e.g. through residual adds and reshapes)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def param(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


_ACTIVE = threading.local()


def _tape_stack():
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; records appear after their inputs.

    Use as a context manager around a forward pass. One tape per pass;
    tensors must not be shared across concurrently-running tapes.
    """

    def __init__(self):
        self._records = []  # (inputs tuple, output, backward_fn)
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    @property
    def records(self):
        return self._records

    def record(self, inputs, output, backward_fn):
        self._records.append((inputs, output, backward_fn))
        output._tape = self

    def backward(self, loss: Tensor):
        if loss.ndim != 0:
            raise DimensionError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if self._used:
            raise TapeError("backward already ran on this tape; build a fresh tape")
        if not self._records:
            raise TapeError("tape is empty; nothing to differentiate")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for inputs, output, backward_fn in reversed(self._records):
            g = output.grad
            if g is None:
                # Recorded but not on any path that was seeded: propagate
                # exact zeros so every reachable tensor ends up populated.
                g = np.zeros_like(output.data)
                output.grad = g
            grads = backward_fn(g)
            for tensor, gi in zip(inputs, grads):
                if tensor.requires_grad and gi is not None:
                    tensor.accumulate_grad(gi)
        # the record list (and the closures it keeps alive) is spent; drop it
        # so the graph's buffers free without waiting for cycle collection
        self._records = []


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss over the tape that produced it."""
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not recorded on a tape; wrap the forward in Tape()")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(inputs, out_data, backward_fn) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    tape = current_tape()
    if rg and tape is not None:
        tape.record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a_shape, b_shape, op_name):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(
            f"{op_name}: shapes {a_shape} and {b_shape} do not broadcast"
        ) from None


# --- core ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Leading (batch) dims must match exactly, except that a
    2-d right operand broadcasts over a stacked left operand (x @ W)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} x {b.shape} do not agree")
    broadcast_w = b.ndim == 2 and a.ndim > 2
    if not broadcast_w and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} x {b.shape} do not agree")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if broadcast_w:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _apply((a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply((a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _apply((a,), out, bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to inf and the quotient to
    # exactly 0, which is the correct limit; suppress the warning only
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def bwd(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _apply((a,), out, bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last dim, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply((a,), y, bwd)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last dim with hard masking: False entries get weight
    exactly zero. ``mask`` broadcasts against ``a`` and every row must keep
    at least one permitted entry."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise DimensionError("masked_softmax: a row has no permitted entries")
    scores = np.where(mask, a.data, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    # a NaN or +inf at any permitted entry surfaces in the row max; a row of
    # only -inf cannot occur past the coverage check above
    if not np.all(np.isfinite(row_max)):
        raise NumericError("masked_softmax: non-finite scores at permitted entries")
    e = np.exp(scores - row_max)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply((a,), y, bwd)


def rmsnorm(a: Tensor, weight: Tensor) -> Tensor:
    a, weight = _as_tensor(a), _as_tensor(weight)
    d = a.shape[-1]
    if weight.ndim != 1 or weight.shape[0] != d:
        raise DimensionError(
            f"rmsnorm weight shape {weight.shape} does not match last dim {d}"
        )
    r = 1.0 / np.sqrt((a.data**2).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    normed = a.data * r
    out = normed * weight.data

    def bwd(g):
        gw_term = g * weight.data
        ga = gw_term * r - a.data * (r**3 / d) * (gw_term * a.data).sum(
            axis=-1, keepdims=True
        )
        gw = (g * normed).reshape(-1, d).sum(axis=0)
        return ga, gw

    return _apply((a, weight), out, bwd)


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    Masked positions contribute exactly zero to both the value and the
    gradient buffer.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects T x V logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    t_len, vocab = logits.shape
    if targets.shape != (t_len,) or mask.shape != (t_len,):
        raise DimensionError(
            f"cross_entropy: targets/mask lengths {targets.shape}/{mask.shape} "
            f"do not match T={t_len}"
        )
    if not mask.any():
        raise EmptyLossError("cross_entropy: every position is masked")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= vocab:
        raise IndexError(
            f"cross_entropy: target id out of vocabulary (V={vocab})"
        )
    rows = logits.data[mask]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    logp_target = shifted[np.arange(rows.shape[0]), sel] - logz
    n = rows.shape[0]
    out = np.asarray(-logp_target.sum() / n)

    def bwd(g):
        probs = np.exp(shifted - logz[:, None])
        probs[np.arange(n), sel] -= 1.0
        glogits = np.zeros_like(logits.data)
        glogits[mask] = probs * (float(g) / n)
        return (glogits,)

    return _apply((logits,), out, bwd)


def embed(weight: Tensor, token_ids) -> Tensor:
    """Row lookup; the gradient scatter-adds into the touched rows."""
    weight = _as_tensor(weight)
    ids = np.asarray(token_ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError(f"embed expects a V x d table, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(
            f"embed: token id out of range for table with {weight.shape[0]} rows"
        )
    out = weight.data[ids]

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _apply((weight,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape {a.shape} -> {shape}: size mismatch")
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _apply((a,), out, bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _apply((a,), out, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """First-axis slice; the gradient scatters back into place."""
    a = _as_tensor(a)
    out = a.data[start:stop]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _apply((a,), out, bwd)


def select_rows(mask, on_true: Tensor, on_false: Tensor) -> Tensor:
    """Per-row choice: rows where ``mask`` is True come from ``on_true``, the
    rest from ``on_false``. ``mask`` spans the leading axes (one entry per
    row), e.g. (T,) against (T, d) or (B, T) against (B, T, d)."""
    on_true, on_false = _as_tensor(on_true), _as_tensor(on_false)
    mask = np.asarray(mask, dtype=bool)
    if on_true.shape != on_false.shape:
        raise DimensionError(
            f"select_rows: branch shapes differ {on_true.shape} vs {on_false.shape}"
        )
    if mask.shape != on_true.shape[: mask.ndim]:
        raise DimensionError(
            f"select_rows: mask shape {mask.shape} does not span leading axes "
            f"of {on_true.shape}"
        )
    sel = mask.reshape(mask.shape + (1,) * (on_true.ndim - mask.ndim))
    out = np.where(sel, on_true.data, on_false.data)

    def bwd(g):
        return np.where(sel, g, 0.0), np.where(sel, 0.0, g)

    return _apply((on_true, on_false), out, bwd)


_ROPE_TRIG_CACHE = {}


def _rope_trig(base: float, hd: int, t: int):
    key = (float(base), hd, t)
    hit = _ROPE_TRIG_CACHE.get(key)
    if hit is None:
        freqs = float(base) ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
        theta = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
        hit = (np.cos(theta), np.sin(theta))
        if len(_ROPE_TRIG_CACHE) > 256:
            _ROPE_TRIG_CACHE.clear()
        _ROPE_TRIG_CACHE[key] = hit
    return hit


def rope(x: Tensor, positions, base: float) -> Tensor:
    """Rotary position encoding over the last dim (pairs of channels).

    ``x`` is (..., T, head_dim) with head_dim even; ``positions`` gives the
    absolute position of each of the T rows (None means 0..T-1).
    """
    x = _as_tensor(x)
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise DimensionError(f"rope needs an even head dim, got {hd}")
    if positions is None:
        cos, sin = _rope_trig(base, hd, x.shape[-2])
    else:
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (x.shape[-2],):
            raise DimensionError(
                f"rope: positions length {positions.shape} does not match "
                f"T={x.shape[-2]}"
            )
        freqs = float(base) ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
        theta = positions[:, None] * freqs[None, :]  # (T, hd/2)
        cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def bwd(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _apply((x,), out, bwd)
