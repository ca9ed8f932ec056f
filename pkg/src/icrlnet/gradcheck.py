"""Finite-difference verification of analytic gradients.

Runs in 64-bit: callers hand over float64 parameter tensors (see
``shadow_params``) so central differences are not drowned by float32
rounding.  For each sampled coordinate the check compares

    (f(p + h) - f(p - h)) / (2h)   vs   analytic grad from backward()

The verdict is the largest coordinate discrepancy relative to the largest
gradient magnitude across the whole parameter set:

    max_i |a_i - n_i| / max(scale, 1e-12),  scale = max_i max(|a_i|, |n_i|)

so parameters whose true gradient is orders of magnitude below the
gradient field's scale do not turn harmless truncation noise into a
failure.  Per-parameter locally-normalized errors are kept for diagnosis.

Functions with kinks (ReLU, max pooling) are only checkable where the
evaluation point keeps every kink farther than the step from crossing;
fixtures are responsible for providing such points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractViolation, Tensor


def shadow_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Float64 copies of a parameter dict, each requiring grad."""
    return {name: Tensor(p.data.astype(np.float64), requires_grad=True)
            for name, p in params.items()}


@dataclass
class ParamCheck:
    coords: int
    max_abs_diff: float
    scale: float          # largest |gradient| within this parameter
    rel_err: float        # locally normalized, for diagnosis


@dataclass
class GradCheckReport:
    max_rel_err: float    # globally normalized; the pass/fail number
    global_scale: float = 0.0
    per_param: dict[str, ParamCheck] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(build_loss, params: dict[str, Tensor], h: float = 1e-3,
               max_coords: int = 24, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() gradients of ``build_loss()`` against central differences.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor,
    deterministic and closed over ``params``.  Up to ``max_coords``
    coordinates per parameter are sampled (all of them when the tensor is
    small).  Parameters must be float64.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractViolation(f"grad_check needs float64 params, {name!r} is {p.data.dtype}")

    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(max_rel_err=0.0)
    worst_abs = 0.0
    global_scale = 1e-12
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        a = analytic[name].reshape(-1)
        diffs = np.zeros(len(coords))
        numeric = np.zeros(len(coords))
        for out_i, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build_loss().item()
            flat[i] = orig - h
            f_minus = build_loss().item()
            flat[i] = orig
            numeric[out_i] = (f_plus - f_minus) / (2.0 * h)
            diffs[out_i] = abs(numeric[out_i] - a[i])
        scale = max(np.abs(a[coords]).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        rel = float(diffs.max(initial=0.0) / scale)
        report.per_param[name] = ParamCheck(len(coords), float(diffs.max(initial=0.0)),
                                            float(scale), rel)
        worst_abs = max(worst_abs, float(diffs.max(initial=0.0)))
        global_scale = max(global_scale, scale)
    report.global_scale = global_scale
    report.max_rel_err = worst_abs / global_scale
    return report
