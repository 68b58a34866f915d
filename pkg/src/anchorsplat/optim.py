"""Adam with per-group learning-rate schedules."""

from __future__ import annotations

import numpy as np

from .config import GroupLR


def group_lr(spec: GroupLR, step):
    """Log-linear decay from ``init`` to ``final`` over ``decay_steps``."""
    if spec.final is None or spec.decay_steps <= 0:
        return spec.init
    t = min(max(step / spec.decay_steps, 0.0), 1.0)
    return float(np.exp(np.log(spec.init) * (1 - t) + np.log(spec.final) * t))


class Adam:
    def __init__(self, params, lrs, beta1=0.9, beta2=0.999, eps=1e-15):
        self.params = list(params)
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    def lr(self, group):
        return group_lr(self.lrs[group], self.step_count)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for p in self.params:
            lr = group_lr(self.lrs[p.group], t - 1)
            m, v = self.m[id(p)], self.v[id(p)]
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    # row surgery for anchor-indexed params
    def select_rows(self, p, keep):
        self.m[id(p)] = self.m[id(p)][keep]
        self.v[id(p)] = self.v[id(p)][keep]

    def extend_rows(self, p, n):
        for store in (self.m, self.v):
            cur = store[id(p)]
            store[id(p)] = np.concatenate([cur, np.zeros((n,) + cur.shape[1:], cur.dtype)])

    def state(self):
        """[(name, m, v)] in parameter order."""
        return [(p.name, self.m[id(p)], self.v[id(p)]) for p in self.params]

    def load_state(self, entries, step):
        by_name = {p.name: p for p in self.params}
        for name, m, v in entries:
            p = by_name[name]
            self.m[id(p)] = np.asarray(m, dtype=p.data.dtype).reshape(p.shape)
            self.v[id(p)] = np.asarray(v, dtype=p.data.dtype).reshape(p.shape)
        self.step_count = step
