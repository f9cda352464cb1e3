"""Adam with a single step-decay of the learning rate."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


def step_decay_lr(epoch, total_epochs, base_lr=1e-4, decay=0.1, at_fraction=0.8):
    """Learning rate for a 0-based ``epoch``: ``base_lr`` until 80% of the run, then ×0.1."""
    return base_lr * decay if epoch >= at_fraction * total_epochs else base_lr


@dataclass
class AdamState:
    base_lr: float = 1e-4
    total_epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, epoch):
        return step_decay_lr(epoch, self.total_epochs, self.base_lr)


def adam_step(state, params, grads, epoch):
    """Update ``params`` (``{name: Tensor}``) in place from ``grads``."""
    state.step += 1
    lr = state.lr(epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
