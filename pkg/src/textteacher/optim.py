"""AdamW with decoupled weight decay and a warmup+cosine learning-rate curve."""
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params, grads, state, hyper, no_decay=()):
    """One AdamW update, in place on ``params`` (dict of arrays).

    Only names present in ``grads`` are touched. ``no_decay`` names skip the
    decoupled ``p -= lr·wd·p`` shrink.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if hyper.weight_decay and name not in no_decay:
            p *= p.dtype.type(1.0 - hyper.lr * hyper.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + hyper.eps
        p -= (hyper.lr / bc1) * m / denom
    return params, state


def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to ``base_lr`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
