"""
AdamW optimizer with a warmup + cosine learning-rate schedule.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from autograd import Parameter
from numerics import ContractError, DimensionError, Tensor


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamWHParams:
    lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimState:
    """
    Per-parameter first/second moments plus the step counter.

    Moments are float64 regardless of the parameter dtype.
    """

    hparams: AdamWHParams = field(default_factory=AdamWHParams)
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)
    step: int = 0
    warmup_steps: int = 0
    total_steps: int = 0

    def lr(self) -> float:
        """Learning rate for the next step."""
        return cosine_lr(self.step, self.hparams.lr, self.hparams.min_lr,
                         self.warmup_steps, self.total_steps)


def init_optim_state(params: Mapping[str, Parameter], hparams: AdamWHParams,
                     warmup_steps: int = 0, total_steps: int = 0) -> OptimState:
    """Zero moments shaped like each parameter."""
    return OptimState(
        hparams=hparams,
        m={name: np.zeros(p.value.shape) for name, p in params.items()},
        v={name: np.zeros(p.value.shape) for name, p in params.items()},
        warmup_steps=warmup_steps,
        total_steps=total_steps,
    )


def cosine_lr(step: int, max_lr: float, min_lr: float, warmup: int, total: int) -> float:
    """
    Linear warmup to max_lr over `warmup` steps, then cosine decay to min_lr at `total`.

    A non-positive total disables the schedule and returns max_lr.
    """
    if total <= 0:
        return max_lr
    if step < warmup:
        return max_lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: Mapping[str, Parameter], grads: Mapping[str, Tensor],
               state: OptimState) -> float:
    """
    One AdamW update applied in place to every parameter.

    The weight decay p <- p * (1 - lr * wd) is applied separately from the
    bias-corrected moment update.

    Args:
        params: name -> Parameter
        grads: name -> gradient, shaped like the parameter
        state: optimizer state, advanced by one step

    Returns:
        Learning rate used for this step
    """
    hp = state.hparams
    lr = state.lr()
    t = state.step + 1
    correction1 = 1.0 - hp.beta1 ** t
    correction2 = 1.0 - hp.beta2 ** t
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient for parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {p.value.shape}")
        m = state.m.setdefault(name, np.zeros(g.shape))
        v = state.v.setdefault(name, np.zeros(g.shape))
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + hp.eps)
        value = p.value.astype(np.float64) * (1.0 - lr * hp.weight_decay)
        p.value = (value - update).astype(p.value.dtype)
    state.step = t
    logger.debug(f"adamw step {t}: lr {lr:.3e}")
    return lr
