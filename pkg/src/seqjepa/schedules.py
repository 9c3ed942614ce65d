"""Learning-rate schedule: linear warmup, then cosine decay to the floor."""

from __future__ import annotations

import math


def lr_at(step: int, warmup_steps: int, total_steps: int,
          peak_lr: float = 4e-4, floor_lr: float = 1e-5) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step <= warmup_steps:
        if warmup_steps == 0:
            return peak_lr
        return floor_lr + (peak_lr - floor_lr) * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor_lr + (peak_lr - floor_lr) * (math.cos(math.pi * frac) + 1.0) / 2.0
