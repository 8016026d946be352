"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from audiocnn.engine.tensor import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@numba.njit(cache=True, nogil=True, fastmath=True)
def _fused_update(p, g, m, v, step, b1, b2, inv_c2, eps):
    # one pass over memory instead of a dozen full-size temporaries;
    # fastmath is safe because gradients were checked finite beforehand
    dt = p.dtype.type
    b1 = dt(b1)
    b2 = dt(b2)
    a1 = dt(1.0) - b1
    a2 = dt(1.0) - b2
    step = dt(step)
    inv_c2 = dt(inv_c2)
    eps = dt(eps)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + a1 * gi
        vi = b2 * v[i] + a2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps)


def adam_step(params: list[Parameter], state: AdamState, learning_rate: float | None = None) -> None:
    """Apply one Adam update in place.

    The whole step is rejected before any parameter moves if a gradient is
    not finite. ``learning_rate`` overrides ``state.learning_rate`` for
    schedules.
    """
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name!r}")
    lr = state.learning_rate if learning_rate is None else learning_rate
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p in trainable:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        grad = np.ascontiguousarray(p.grad, dtype=p.dtype)
        _fused_update(
            p.data.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
            lr / correction1, b1, b2, 1.0 / correction2, state.epsilon,
        )
    state.step_count = t
