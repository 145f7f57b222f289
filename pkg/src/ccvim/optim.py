"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor


def cosine_lr(step: int, base_lr: float, t_max: int, floor: float = 0.0) -> float:
    """``floor + (base_lr - floor) * (1 + cos(pi * step / t_max)) / 2``; clamps past ``t_max``."""
    if t_max < 1:
        raise ContractError("t_max must be >= 1")
    if step < 0:
        raise ContractError("step must be >= 0")
    if step >= t_max:
        return floor
    return floor + (base_lr - floor) * (1.0 + math.cos(math.pi * step / t_max)) / 2.0


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, named_params, lr: float) -> None:
        """Update every ``(name, tensor)`` in place from its ``.grad`` (missing grad = zero)."""
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter '{name}'")
            if p.grad is not None and p.grad.shape != p.shape:
                raise ContractError(f"gradient of '{name}' has shape {p.grad.shape}, expected {p.shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: AdamW, lr: float) -> AdamW:
    """Functional form: copy ``grads`` onto ``params`` and take one AdamW step."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    named = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p.grad = np.asarray(g, dtype=np.float64)
        named.append((f"param{i}", p))
    state.step(named, lr)
    return state
