"""Adam over named parameter tensors, with per-parameter moment buffers."""

from __future__ import annotations

import math

import torch


def exponential_lr(lr_init, lr_final, step, total):
    """Log-linear interpolation from lr_init (step 0) to lr_final (step total - 1)."""
    if total <= 1 or lr_final == lr_init:
        return lr_init
    frac = min(max(step / (total - 1), 0.0), 1.0)
    if frac == 0.0:
        return lr_init
    if frac == 1.0:
        return lr_final
    return math.exp((1 - frac) * math.log(lr_init) + frac * math.log(lr_final))


class Adam:
    """Adaptive moment estimation keyed by parameter name.

    Moment buffers live in ``self.m`` / ``self.v`` and the per-name step count
    in ``self.steps``; they can be resized alongside their parameter (see
    :meth:`remap`).
    """

    def __init__(self, beta1=0.9, beta2=0.999):
        self.beta1 = beta1
        self.beta2 = beta2
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, params, lrs, eps):
        """Update every tensor in ``params`` (name -> leaf) that has a gradient."""
        b1, b2 = self.beta1, self.beta2
        with torch.no_grad():
            for name, p in params.items():
                g = p.grad
                if g is None:
                    continue
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                    self.steps[name] = 0
                m, v = self.m[name], self.v[name]
                self.steps[name] += 1
                t = self.steps[name]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1 ** t)
                denom = (v / (1 - b2 ** t)).sqrt_().add_(eps[name])
                p.sub_(lrs[name] * m_hat / denom)

    def remap(self, name, index, extra):
        """Reorder moments of ``name`` by ``index`` and append ``extra`` zero rows."""
        if name not in self.m:
            return
        for buf in (self.m, self.v):
            old = buf[name][index]
            pad = torch.zeros((extra,) + old.shape[1:], dtype=old.dtype)
            buf[name] = torch.cat([old, pad], 0)

    def select(self, name, keep):
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]
