"""AdamW with parameter groups and global-norm gradient clipping."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` is a list of dicts with ``params`` and ``lr`` (and optionally
    ``weight_decay``). Moments are kept per parameter in group order.
    """

    def __init__(self, groups, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.groups = [dict(g) for g in groups]
        for g in self.groups:
            g.setdefault("weight_decay", weight_decay)
            g["base_lr"] = g["lr"]
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]

    def params(self):
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def set_lr_scale(self, scale):
        for g in self.groups:
            g["lr"] = g["base_lr"] * scale

    def clip_grad_norm(self, max_norm):
        """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
        grads = [p.grad for p in self.params() if p.grad is not None]
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if max_norm > 0 and total > max_norm:
            s = max_norm / (total + 1e-6)
            for p in self.params():
                if p.grad is not None:
                    p.grad = p.grad * s
        return total

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for g, ms, vs in zip(self.groups, self.m, self.v):
            lr, wd = g["lr"], g["weight_decay"]
            for p, m, v in zip(g["params"], ms, vs):
                if p.grad is None:
                    continue
                p.data *= 1.0 - lr * wd
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        """Flat ``{name: array}`` view of optimizer state for checkpoints."""
        out = {"step": np.array([float(self.step_count)])}
        for gi, (ms, vs) in enumerate(zip(self.m, self.v)):
            for pi, (m, v) in enumerate(zip(ms, vs)):
                out[f"m.{gi}.{pi}"] = m
                out[f"v.{gi}.{pi}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["step"][0])
        for gi, (ms, vs) in enumerate(zip(self.m, self.v)):
            for pi in range(len(ms)):
                ms[pi][...] = arrays[f"m.{gi}.{pi}"]
                vs[pi][...] = arrays[f"v.{gi}.{pi}"]
