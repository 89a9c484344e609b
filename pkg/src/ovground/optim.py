"""Adam with global-norm gradient clipping and a linearly decaying rate."""

from __future__ import annotations

import math

import numpy as np

from .autograd import ContractError, Tensor


def global_grad_norm(params: dict[str, Tensor]) -> float:
    """2-norm of all gradients concatenated into one vector."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = np.ravel(p.grad)
            total += float(np.dot(g, g))
    return math.sqrt(total)


class Adam:
    """Adam over a named parameter dict, stepped once per optimization step.

    The effective learning rate at step t (0-based) is
    base_lr * max(0, 1 - t / total_steps), so the very first step runs at the
    full base rate and the schedule hits exactly zero at t = total_steps.
    Before each update the global gradient 2-norm is clipped to `clip_norm`.
    Gradients are consumed: after `step()` every param's grad is None.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, total_steps: int,
                 clip_norm: float = 1.0, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if total_steps <= 0:
            raise ContractError(f"total_steps must be positive, got {total_steps}")
        self.params = params
        self.lr = float(lr)
        self.total_steps = int(total_steps)
        self.clip_norm = float(clip_norm)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        # scratch for temporary-free updates; update math is unchanged
        self._s1 = {k: np.empty_like(p.data) for k, p in params.items()}
        self._s2 = {k: np.empty_like(p.data) for k, p in params.items()}

    def lr_at(self, t: int) -> float:
        return self.lr * max(0.0, 1.0 - t / self.total_steps)

    def step(self, lr_override: float | None = None) -> float:
        """Apply one clipped Adam update; returns the pre-clip grad norm.

        `lr_override` substitutes this step's rate without touching the
        built-in schedule (used for per-epoch decay).
        """
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        norm = global_grad_norm(self.params)
        clip = self.clip_norm > 0 and norm > self.clip_norm
        scale = self.clip_norm / norm if clip else 1.0
        lr_t = self.lr_at(self.step_count) if lr_override is None else lr_override
        t1 = self.step_count + 1
        bc1 = 1.0 - self.beta1 ** t1
        bc2 = 1.0 - self.beta2 ** t1
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            s1, s2 = self._s1[name], self._s2[name]
            if clip:
                np.multiply(g, scale, out=g)
            # m = b1*m + (1-b1)*g ; v = b2*v + ((1-b2)*g)*g, same op order
            # as the naive expressions so results stay bitwise identical
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s1)
            m += s1
            v *= self.beta2
            np.multiply(g, 1.0 - self.beta2, out=s1)
            np.multiply(s1, g, out=s1)
            v += s1
            # p -= lr_t * (m/bc1) / (sqrt(v/bc2) + eps)
            np.divide(v, bc2, out=s1)
            np.sqrt(s1, out=s1)
            s1 += self.eps
            np.divide(m, bc1, out=s2)
            np.multiply(s2, lr_t, out=s2)
            np.divide(s2, s1, out=s2)
            np.subtract(p.data, s2, out=p.data)
            p.grad = None
        self.step_count += 1
        return norm
