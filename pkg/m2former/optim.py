"""
Adam optimizer, learning rate schedule and gradient clipping.
"""
import math
from typing import List
import numpy as np
from m2former.tensor import Parameter


def inverse_sqrt_lr(step: int, peak_lr: float, warmup: int) -> float:
    """
    Linear warmup to peak_lr over `warmup` steps, then decay proportional to 1/sqrt(step).

    :param step: 1-based optimizer step
    """
    step = max(step, 1)
    if warmup <= 0:
        return peak_lr / math.sqrt(step)
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


def clip_grad_norm(params: List[Parameter], max_norm: float) -> float:
    """
    Scale gradients in place so that their global L2 norm is at most max_norm.

    :return: Norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    def __init__(
        self,
        params: List[Parameter],
        betas=(0.9, 0.98),
        eps: float = 1e-9,
    ):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
