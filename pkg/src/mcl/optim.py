"""Optimizers and schedules for montage pretraining.

LARS scales each parameter's step by the ratio of weight norm to
gradient norm, which keeps large-batch training stable; biases and
normalization affines are excluded from both weight decay and the trust
ratio, receiving plain momentum SGD steps. The learning rate follows
linear warmup into a cosine decay that reaches exactly zero at the
final step, and the base rate scales linearly with batch size against
a reference batch of 256.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import BIAS, Parameter, WEIGHT


@dataclass(frozen=True)
class OptimConfig:
    lr_scale: float = 1.0
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    warmup_epochs: int = 10
    exclude_bias_and_norm: bool = True


def base_lr(lr_scale: float, batch_size: int) -> float:
    return lr_scale * batch_size / 256.0


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base: float) -> float:
    """Linear warmup to `base`, then cosine decay to exactly zero.

    Defined on steps 0..total_steps inclusive; the endpoint evaluates to
    0.0 exactly because 1 + cos(pi) cancels in floating point.
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError(f"warmup {warmup_steps} exceeds {total_steps} total steps")
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        raise RuntimeError(f"non-finite gradient in {name}")


class Lars:
    """Layer-wise adaptive rate scaling with momentum.

    Per parameter: g <- grad (+ wd * w unless excluded); the local rate
    is lr * trust_coefficient * ||w|| / ||g|| when both norms are
    positive (1.0 * lr otherwise, and always for excluded parameters);
    v <- momentum * v + local_lr * g; w <- w - v.
    """

    def __init__(self, named_params: list[tuple[str, Parameter]], cfg: OptimConfig):
        self.named_params = list(named_params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float) -> None:
        cfg = self.cfg
        for (name, p), v in zip(self.named_params, self.velocity):
            if p.grad is None:
                continue
            _check_finite(name, p.grad)
            excluded = cfg.exclude_bias_and_norm and p.kind != WEIGHT
            g = p.grad if excluded else p.grad + cfg.weight_decay * p.data
            if excluded:
                trust = 1.0
            else:
                wn = float(np.linalg.norm(p.data))
                gn = float(np.linalg.norm(g))
                trust = cfg.trust_coefficient * wn / gn if wn > 0 and gn > 0 else 1.0
            v *= cfg.momentum
            v += (lr * trust) * g
            p.data -= v

    def state_arrays(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": v for (name, _), v in zip(self.named_params, self.velocity)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "optim.") -> None:
        for (name, _), v in zip(self.named_params, self.velocity):
            src = arrays[f"{prefix}{name}"]
            if src.shape != v.shape:
                raise ValueError(f"velocity shape mismatch for {name}")
            v[...] = src


class Sgd:
    """Momentum SGD with optional weight decay; used by the supervised
    objective and the linear probe."""

    def __init__(self, named_params: list[tuple[str, Parameter]],
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float) -> None:
        for (name, p), v in zip(self.named_params, self.velocity):
            if p.grad is None:
                continue
            _check_finite(name, p.grad)
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= lr * v

    def state_arrays(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": v for (name, _), v in zip(self.named_params, self.velocity)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "optim.") -> None:
        for (name, _), v in zip(self.named_params, self.velocity):
            src = arrays[f"{prefix}{name}"]
            if src.shape != v.shape:
                raise ValueError(f"velocity shape mismatch for {name}")
            v[...] = src


def weight_rescale(module, alpha: float) -> None:
    """Divide conv/linear weights and biases by alpha, leaving norm
    affines untouched. A following batch norm makes the forward pass
    invariant to the rescaling (exactly so as its epsilon tends to 0)
    while the gradients on the shrunken weights grow by alpha."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    for _, p in module.named_parameters():
        if p.kind in (WEIGHT, BIAS):
            p.data /= p.data.dtype.type(alpha)
