"""AdamW with decoupled weight decay and a linear warm-up/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..errors import NonFiniteGradient


def lr_schedule(step: float, total_steps: float, base_lr: float, warmup_proportion: float) -> float:
    """Linear ramp 0 -> base_lr over the warm-up steps, then linear decay to 0."""
    if total_steps <= 0:
        return base_lr
    warmup = warmup_proportion * total_steps
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warmup))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices, not to biases or layer-norm parameters."""
    return not (name.endswith("bias") or "norm" in name)


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """In-place bias-corrected Adam update with decoupled weight decay."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if weight_decay and decays(name):
            p.mul_(1 - lr * weight_decay)
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)
    return state
