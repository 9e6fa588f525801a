# /qsf/optim.py

"""OneCycle learning-rate schedule and AdamW with global-norm clipping."""

import logging
import math

import numpy as np

from .config import ADAM_BETAS, ADAM_EPS, GRAD_CLIP, WEIGHT_DECAY
from .errors import NumericError

logger = logging.getLogger(__name__)


def onecycle_lr(step, lr_max, lr_min, warmup_steps, max_steps):
    """Linear warmup 0 -> lr_max, then cosine decay lr_max -> lr_min; clamped to lr_min past max_steps."""
    if step >= max_steps:
        return float(lr_min)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / max(1, max_steps - warmup_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scales every gradient by max_norm / norm when the global norm exceeds max_norm. Returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


class AdamW:
    """Adam with decoupled weight decay over a ParamStore; frozen parameters are never touched."""

    def __init__(self, params, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=WEIGHT_DECAY, grad_clip=GRAD_CLIP):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {name: np.zeros_like(data) for name, data in params.items()}
        self.v = {name: np.zeros_like(data) for name, data in params.items()}

    def step(self, grads, lr):
        """One update from ``grads`` (name -> array). Returns the pre-clip global norm."""
        grads = {name: g for name, g in grads.items() if not self.params.is_frozen(name)}
        bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
        if bad:
            raise NumericError(f"non-finite gradient in {', '.join(bad)} at step {self.step_count + 1}")
        norm = clip_by_global_norm(grads, self.grad_clip) if self.grad_clip else global_norm(grads)
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.params[name]
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps) + self.weight_decay * p
            self.params.set_value(name, p - lr * update)
        return norm

    def state_dict(self):
        return {'step': self.step_count,
                'm': {k: v.copy() for k, v in self.m.items()},
                'v': {k: v.copy() for k, v in self.v.items()}}
