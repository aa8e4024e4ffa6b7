"""AdamW with decoupled weight decay, cosine LR schedule, global-norm
gradient clipping, and an EMA shadow of the parameters.

Update order per training step (the trainer enforces it): clip -> step -> EMA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


def cosine_lr(step: int, warmup: int, peak: float, final: float, total: int) -> float:
    """Linear ramp 0 -> peak over `warmup` steps, then cosine decay to `final`."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup >= total:
        raise ValueError("warmup must be < total")
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: list[np.ndarray]) -> float:
    """L2 norm over the concatenation of all gradients, in argument order."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(grads: list[np.ndarray], threshold: float) -> list[np.ndarray]:
    """Scale all gradients by threshold/norm when the global norm exceeds it."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return [g * scale for g in grads]


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the EMA shadow.

    Parameters are identified by name; moment tensors always shape-match
    their parameter.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    clip_threshold: float = 1.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema decay must be in [0, 1]")
        if self.clip_threshold <= 0:
            raise ValueError("clip threshold must be positive")


def init_optimizer(params: dict[str, Tensor], **kwargs) -> OptimizerState:
    state = OptimizerState(**kwargs)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
        state.ema[name] = p.data.copy()
    return state


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One decoupled-weight-decay update with bias-corrected moments,
    followed by the EMA shadow update. Mutates params and state in place."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param {name} shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * update + lr * state.weight_decay * p.data
    d = state.ema_decay
    for name, p in params.items():
        state.ema[name] = d * state.ema[name] + (1.0 - d) * p.data
