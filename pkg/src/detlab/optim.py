"""Plain stochastic gradient descent with a one-step learning-rate drop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    lr_drop_epoch: int = 40
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4

    def lr_at(self, epoch):
        """Learning rate during 1-indexed `epoch`: flat until the drop
        epoch, scaled by `lr_drop_factor` from then on."""
        if epoch >= self.lr_drop_epoch:
            return self.lr * self.lr_drop_factor
        return self.lr


def sgd_step(params, config, epoch):
    """In-place update w <- w - lr * (grad + weight_decay * w) for each
    parameter, then reset grads to zero. Raises if any grad is missing or
    non-finite. Decay applies to weight matrices only: biases, norm gains,
    and other vector parameters are regularized by it without bound-keeping
    benefit, and a decayed bias fights any head that must hold a large
    offset."""
    lr = config.lr_at(epoch)
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {getattr(p, 'name', '?')} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {getattr(p, 'name', '?')}")
        decay = config.weight_decay if p.data.ndim >= 2 else 0.0
        p.data -= lr * (p.grad + decay * p.data)
        p.grad = np.zeros_like(p.data)


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm):
    """Scale all grads down so their joint L2 norm is at most `max_norm`.
    Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
