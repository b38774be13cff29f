"""AdamW, EMA teacher update, and the lr schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import Module, Parameter


class AdamW:
    """Adam with decoupled weight decay.

    Per step, in order: p *= (1 - lr * weight_decay), then the moment
    updates, then p -= lr * m_hat / (sqrt(v_hat) + eps). Parameters whose
    grad is None are skipped entirely (no decay, no moment update).
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= self.lr * (m / bc1) / denom

    def state_entries(self, named_params):
        """(name, array) pairs for resume checkpoints. named_params must be
        the same parameters, in the same order, this optimizer was built on."""
        named = list(named_params)
        if len(named) != len(self.params) or any(p is not q for (_, p), q in zip(named, self.params)):
            raise ValueError("named_params do not match this optimizer's parameters")
        out = [("opt.step", np.array([self.t], dtype=np.int64))]
        for (name, _), m in zip(named, self.exp_avg):
            out.append((f"opt.m.{name}", m))
        for (name, _), v in zip(named, self.exp_avg_sq):
            out.append((f"opt.v.{name}", v))
        return out

    def load_state_entries(self, entries: dict, named_params):
        named = list(named_params)
        if len(named) != len(self.params) or any(p is not q for (_, p), q in zip(named, self.params)):
            raise ValueError("named_params do not match this optimizer's parameters")
        self.t = int(np.asarray(entries["opt.step"])[0])
        for i, (name, _) in enumerate(named):
            self.exp_avg[i] = np.asarray(entries[f"opt.m.{name}"]).copy()
            self.exp_avg_sq[i] = np.asarray(entries[f"opt.v.{name}"]).copy()


def ema_update(teacher: Module, student: Module, momentum: float):
    """teacher <- momentum * teacher + (1 - momentum) * student, parameterwise.

    momentum must lie in [0, 1); 1 would freeze the teacher forever and is
    rejected. Buffers are not touched (the teacher tracks no running stats).
    """
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"EMA momentum must be in [0, 1), got {momentum}")
    t_named = list(teacher.named_parameters())
    s_named = list(student.named_parameters())
    if [n for n, _ in t_named] != [n for n, _ in s_named]:
        raise ValueError("teacher/student parameter names do not line up")
    for (_, tp), (_, sp) in zip(t_named, s_named):
        tp.data *= momentum
        tp.data += (1.0 - momentum) * sp.data


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float,
                     min_lr: float = 0.0) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr. step is 0-based."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
