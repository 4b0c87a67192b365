"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DeterminismError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    passed: bool
    tol: float
    excluded: list[list[tuple[int, ...]]] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def _evaluate(f, arrays) -> float:
    with no_grad():
        out = f([Tensor(a) for a in arrays])
    return float(np.asarray(out.data).reshape(-1)[0])


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-5,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|)``,
    i.e. the worst coordinate error scaled by that parameter's gradient
    magnitude (0 when both gradients vanish).

    A coordinate is reported as a non-differentiable point, and excluded,
    when its one-sided difference quotients disagree by more than
    ``kink_tol`` and the jump does not shrink when ``h`` is divided by 10.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in params]

    f0 = _evaluate(f, arrays)
    if _evaluate(f, arrays) != f0:
        raise DeterminismError("f returned different values for identical parameters")

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(leaves)
    backward(out)
    analytic = [leaf.grad for leaf in leaves]

    errors, excluded = [], []
    for k, arr in enumerate(arrays):
        numeric = np.zeros_like(arr)
        skip = []
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def at(delta):
                flat[i] = orig + delta
                v = _evaluate(f, arrays)
                flat[i] = orig
                return v

            fp, fm = at(h), at(-h)
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
            jump = abs((fp - f0) - (f0 - fm)) / h
            if jump > kink_tol * max(1.0, abs(numeric.reshape(-1)[i])):
                hs = h / 10
                jump_small = abs((at(hs) - f0) - (f0 - at(-hs))) / hs
                if jump_small > 0.5 * jump:
                    skip.append(np.unravel_index(i, arr.shape))
        a = analytic[k].copy()
        n = numeric
        for idx in skip:
            a[idx] = n[idx] = 0.0
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        diff = np.abs(a - n).max(initial=0.0)
        errors.append(0.0 if scale == 0.0 else float(diff / scale))
        excluded.append([tuple(int(j) for j in idx) for idx in skip])
    return GradCheckReport(max_rel_error=errors, passed=all(e <= tol for e in errors), tol=tol, excluded=excluded)
