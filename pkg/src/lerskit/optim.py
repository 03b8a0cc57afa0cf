"""Adam optimizer with optional analytic L2 coupling.

The L2 penalty can either be differentiated through the loss (the trainers
here do that, matching the objective definitions) or injected analytically
as 2*l2*w before the moment update; both routes produce the same gradient,
so `l2` defaults to 0 and must not be combined with a loss-side penalty.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, l2: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one bias-corrected update from the gradients stored on the
        parameters. Parameters with no gradient this step still advance their
        moment decay (gradient treated as zero)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {p.name or f'#{i}'}")
            if self.l2 != 0.0:
                g = g + 2.0 * self.l2 * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.assign(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # -- checkpoint support --
    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {f"{prefix}.step": np.array([self.step_count], dtype=np.int64)}
        for i in range(len(self.params)):
            out[f"{prefix}.m.{i}"] = self.m[i]
            out[f"{prefix}.v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "adam") -> None:
        self.step_count = int(arrays[f"{prefix}.step"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"{prefix}.m.{i}"])
            self.v[i] = np.array(arrays[f"{prefix}.v.{i}"])
