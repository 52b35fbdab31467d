"""Central finite-difference gradient checking.

This is the independent oracle for every differentiable op and for whole
models: it only re-evaluates forward passes, never touches the tape's
adjoint logic.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, step adapted to coordinate scale."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        step = h * max(1.0, abs(orig))
        flat_x[i] = orig + step
        f_plus = float(f(x))
        flat_x[i] = orig - step
        f_minus = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Elementwise |a-b| / max(|a|,|b|,floor), maximized.

    The floor keeps finite-difference round-off (~1e-10 absolute at h=1e-6)
    from dominating coordinates whose true gradient is near zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def check_gradients(loss_fn, params: dict, h: float = 1e-6) -> dict:
    """Compare tape gradients against central differences for every parameter.

    ``loss_fn()`` must rebuild the forward pass from the current contents of
    ``params`` (name -> Tensor) and return a scalar Tensor. Returns
    name -> max relative error.
    """
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = loss_fn()
        backward(loss)
    # a parameter the loss never touches legitimately has no grad buffer
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    errors = {}
    for name, p in params.items():

        def f_of(buf, _p=p):
            saved = _p.data
            _p.data = buf
            try:
                return loss_fn().item()
            finally:
                _p.data = saved

        fd = numeric_grad(f_of, p.data.copy(), h=h)
        errors[name] = max_rel_error(analytic[name], fd)
    return errors


def check_op(op_fn, arrays, h: float = 1e-6) -> float:
    """Gradient-check a single op against a weighted sum of its output.

    ``op_fn`` maps Tensors to one Tensor; ``arrays`` are the input buffers.
    The probe weights are asymmetric so transposed/mixed-up adjoints cannot
    cancel out. Returns the max relative error over all inputs.
    """
    params = {f"x{i}": Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}

    def loss_fn():
        out = op_fn(*params.values())
        return _weighted_sum(out, _probe_weights(out.size))

    errs = check_gradients(loss_fn, params, h=h)
    return max(errs.values())


def _probe_weights(n: int) -> np.ndarray:
    return np.cos(0.7 * np.arange(max(n, 1)) + 0.3)


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    from . import autodiff as ad

    if t.ndim == 0:
        return ad.scale(t, float(w[0]))
    prod = ad.mul(ad.reshape(t, (t.size,)), Tensor(w))
    col = ad.reshape(prod, (t.size, 1))
    return ad.reshape(ad.matmul(Tensor(np.ones((1, t.size))), col), ())
