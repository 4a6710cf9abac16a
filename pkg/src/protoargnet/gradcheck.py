"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


@dataclass
class GradCheckReport:
    tolerance: float
    max_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_error, key=self.max_error.get)
        return name, self.max_error[name]


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor] | Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``f()`` with central differences.

    ``f`` closes over ``params`` and is re-evaluated after each in-place
    perturbation. With ``max_coords`` only that many coordinates per parameter
    are probed, drawn from ``rng``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Tensor):
        params = {"point": params}
    elif not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, tape)

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
        err = relative_error(analytic[coords], numeric)
        report.max_error[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(coords.size)
    return report
