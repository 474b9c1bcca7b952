"""Central-difference gradient checking for the layer kernels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LossAndGrads = Callable[..., tuple[float, tuple[np.ndarray, ...]]]


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    worst_input: int            # index into the checked inputs
    worst_coord: int            # flat coordinate within that input

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"grad_check {verdict}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}) at input {self.worst_input} "
                f"coord {self.worst_coord}")


def grad_check(
    fn: LossAndGrads,
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare fn's analytic gradients against central differences.

    fn(*inputs) must return (loss, grads) with one gradient per input, same
    shapes. Every coordinate of every input is perturbed by +-epsilon; the
    per-coordinate relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, analytic = fn(*inputs)
    if len(analytic) != len(inputs):
        raise ValueError(f"fn returned {len(analytic)} gradients for {len(inputs)} inputs")

    worst = (0.0, 0, 0)
    for i, x in enumerate(inputs):
        a = np.asarray(analytic[i], dtype=np.float64)
        if a.shape != x.shape:
            raise ValueError(f"gradient {i} shape {a.shape} != input shape {x.shape}")
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lo_plus, _ = fn(*inputs)
            flat[j] = orig - epsilon
            lo_minus, _ = fn(*inputs)
            flat[j] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
            av = a.reshape(-1)[j]
            err = abs(av - numeric) / max(abs(av), abs(numeric), 1e-8)
            if err > worst[0]:
                worst = (err, i, j)

    return GradCheckReport(
        passed=worst[0] <= tolerance,
        max_rel_error=worst[0],
        tolerance=tolerance,
        worst_input=worst[1],
        worst_coord=worst[2],
    )
