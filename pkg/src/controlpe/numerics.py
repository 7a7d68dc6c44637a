"""Dense kernels, loss, optimizer and a finite-difference gradient oracle.

Matrices are plain 2-D numpy arrays. Storage is float32; the oracles
(``finite_diff_grad``, gradient checks) accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Matrix = np.ndarray
DTYPE = np.float32

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce ``data`` to a finite float32 matrix, optionally checking its shape."""
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected non-empty 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix has non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax input has non-finite entries")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    gain = np.asarray(gain).reshape(-1)
    if x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"length mismatch: x has {x.shape[-1]}, gain has {gain.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    denom = np.sqrt(ms + eps)
    # all-zero rows with eps = 0 stay zero
    safe = np.where(denom > 0, denom, 1)
    return gain * x / safe


def rms_norm_backward(grad_out: np.ndarray, x: np.ndarray, gain: np.ndarray,
                      eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``rms_norm`` w.r.t. ``x`` and ``gain`` (gain summed over leading axes)."""
    gain = np.asarray(gain).reshape(-1)
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    g_gain = (grad_out * xhat).reshape(-1, n).sum(axis=0)
    gy = grad_out * gain
    gx = inv * (gy - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
    return gx, g_gain


def cross_entropy(logits: np.ndarray, targets, mask) -> float:
    """Mean of ``-log softmax(logits_t)[target_t]`` over masked positions."""
    loss, _ = cross_entropy_with_grad(logits, targets, mask, need_grad=False)
    return loss


def cross_entropy_with_grad(logits: np.ndarray, targets, mask, need_grad: bool = True):
    """Masked mean cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading shape.
    The loss is accumulated in float64.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty loss mask: example has no target positions")
    V = logits.shape[-1]
    if np.any(targets[mask] >= V) or np.any(targets[mask] < 0):
        raise ValueError(f"target id out of range [0, {V})")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("logits have non-finite entries")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = float(-(picked.astype(np.float64) * mask).sum() / n)
    if not need_grad:
        return loss, None
    grad = np.exp(logp)
    np.put_along_axis(grad, safe_t[..., None],
                      np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1, axis=-1)
    grad *= (mask / n)[..., None].astype(grad.dtype)
    return loss, grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and optimizer state have different keys")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for {k!r}: param {p.shape}, grad {g.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p - upd).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params`` (float64)."""
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(p))
        flat[i] = orig - h
        down = float(loss_fn(p))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"loss is non-finite at coordinate {i}")
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h
