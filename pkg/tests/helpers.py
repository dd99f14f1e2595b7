"""Shared oracles for the test-suite."""

from __future__ import annotations

import numpy as np

from xdistill import autograd as ag

FD_STEP = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_leaf_grads(build, leaves: dict[str, np.ndarray], h: float = FD_STEP) -> float:
    """Worst relative error between autograd and central differences over several leaves.

    ``build(tensors)`` maps a dict of leaf Tensors to a scalar Tensor.
    """
    tensors = {k: ag.param(v) for k, v in leaves.items()}
    ag.backward(build(tensors))
    worst = 0.0
    for name, value in leaves.items():
        def f(x, name=name):
            trial = {k: ag.Tensor(v) for k, v in leaves.items()}
            trial[name] = ag.Tensor(x)
            return build(trial).item()
        worst = max(worst, rel_error(tensors[name].grad, numeric_grad(f, value, h)))
    return worst


ACCEPTANCE_LINES: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    """Record one pass/fail line for the terminal summary, print it, then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
