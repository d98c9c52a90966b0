"""Central-difference gradient verification."""
from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import GradCheckError
from .tensor import Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]


def _named(x) -> dict[str, Tensor]:
    if isinstance(x, Tensor):
        return {"x": x}
    if isinstance(x, Mapping):
        return dict(x)
    return {str(i): t for i, t in enumerate(x)}


def grad_check(
    f: Callable,
    x,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(x)`` against central differences.

    ``x`` is a tensor, a sequence of tensors, or a name -> tensor mapping;
    ``f`` is called with ``x`` unchanged and must return a scalar tensor.
    Element-wise relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``f`` must reseed any randomness it uses; two evaluations at the same
    point that disagree raise :class:`GradCheckError`.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-6, 1e-4], got {step}")
    named = _named(x)
    for t in named.values():
        t.zero_grad()
    loss = f(x)
    with no_grad():
        again = f(x)
    if loss.data.tobytes() != again.data.tobytes():
        raise GradCheckError("function is not deterministic under a fixed seed")
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}

    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    with no_grad():
        for name, t in named.items():
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f(x).item()
                flat[i] = orig - step
                down = f(x).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)
            abs_err = np.abs(a - numeric)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            rel = float((abs_err / denom).max()) if flat.size else 0.0
            report.params.append(
                ParamCheck(name, rel, float(abs_err.max()) if flat.size else 0.0, rel < tolerance)
            )
            report.max_rel_err = max(report.max_rel_err, rel)
    for t in named.values():
        t.zero_grad()
    return report
