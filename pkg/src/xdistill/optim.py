"""AdamW with decoupled weight decay and a cosine one-cycle schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor


@dataclass
class AdamW:
    params: dict[str, Tensor]
    lr: float = 1e-3
    weight_decay: float = 0.005
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adamw: grad shape {g.shape} != param shape {p.data.shape} for {name}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adamw.m.{name}"] = self.m[name]
            out[f"adamw.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"adamw.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adamw.v.{name}"], dtype=np.float64)
        self.step_count = step_count


def adamw_step(opt: AdamW, lr: float | None = None) -> dict[str, Tensor]:
    opt.step(lr)
    return opt.params


def one_cycle_lr(step: int, total_steps: int, max_lr: float, warmup_fraction: float = 0.1,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warmup from max_lr/div_factor to max_lr, then cosine anneal to max_lr/final_div.

    The peak sits at step ``round(warmup_fraction * (total_steps - 1))``; the
    last step returns exactly ``max_lr / final_div``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return max_lr
    peak = int(round(warmup_fraction * (total_steps - 1)))
    initial = max_lr / div_factor
    final = max_lr / final_div
    if step <= peak:
        if peak == 0:
            return max_lr
        pct = step / peak
        return _cos_interp(initial, max_lr, pct)
    pct = (step - peak) / (total_steps - 1 - peak)
    return _cos_interp(max_lr, final, pct)


def _cos_interp(start: float, end: float, pct: float) -> float:
    """Cosine interpolation; exact at both ends."""
    if pct >= 1.0:
        return end
    return end + (start - end) * (1.0 + math.cos(math.pi * pct)) / 2.0
