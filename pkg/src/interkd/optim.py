"""Adam with linear warm-up followed by inverse-square-root decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def warmup_inverse_sqrt(step: int, peak: float, warmup: int) -> float:
    """Learning rate at ``step``: 0 at step 0, peak at ``warmup``, then peak*sqrt(warmup/step)."""
    if step <= 0:
        return 0.0
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, np.sqrt(warmup / step))


@dataclass
class OptimizerState:
    peak_lr: float = 1e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float | None = 5.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return warmup_inverse_sqrt(self.step, self.peak_lr, self.warmup)


def optimizer_step(state: OptimizerState, params: dict[str, Tensor]) -> float:
    """Apply one Adam update to ``params`` (name -> tensor) and zero their grads.

    Returns the learning rate that was used. A non-finite gradient aborts the
    step before any parameter is touched.
    """
    grads = {name: p.grad for name, p in params.items()}
    total = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not np.isfinite(total):
        bad = next((n for n, g in grads.items() if not np.all(np.isfinite(g))), None)
        where = f"in parameter {bad!r}" if bad else "norm (overflow)"
        raise NonFiniteGradientError(f"non-finite gradient {where}")
    if state.clip_norm is not None and total > state.clip_norm:
        factor = state.clip_norm / total
        grads = {name: g * factor for name, g in grads.items()}

    state.step += 1
    lr = state.lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        # fewer temporaries, same operation order as lr/c1 * m / (sqrt(v/c2) + eps);
        # parameter data is replaced rather than mutated so tensors stay immutable
        denom = np.divide(v, c2)
        np.sqrt(denom, out=denom)
        denom += state.eps
        upd = np.multiply(m, lr / c1)
        upd /= denom
        p.data = p.data - upd
        p.grad.fill(0.0)
    return lr
