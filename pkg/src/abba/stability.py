"""Second-moment diagnostics for the rank-stability argument.

With every factor entry drawn i.i.d. with zero mean and unit variance and a
unit-variance input, each output entry of ``dW x`` has second moment
``s^2 * n * r1 * r2`` (and the input gradient ``dW^T g`` has
``s^2 * m * r1 * r2``). The ``1/sqrt(r1 r2)`` scale cancels the rank factor;
a constant scale lets it grow with ``r1 r2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AbbaAdapter, abba_scale
from .errors import ParameterError
from .seeding import rng_stream


@dataclass(frozen=True)
class MomentPoint:
    rank_budget: int
    r1: int
    r2: int
    scale: float
    output_moment: float
    input_grad_moment: float


def predicted_moment(scale: float, fan: int, r1: int, r2: int) -> float:
    return scale * scale * fan * r1 * r2


def adapter_moments(
    rank_budget: int,
    m: int = 128,
    n: int = 128,
    draws: int = 50,
    batch: int = 32,
    alpha: float = 1.0,
    scale: float | None = None,
    seed: int = 0,
) -> MomentPoint:
    """Empirical ``E[y^2]`` and ``E[g_x^2]`` averaged over ``draws`` random adapters.

    ``r1 = r2 = rank_budget / 2``. ``scale`` overrides the adapter's own
    ``alpha^2 / sqrt(r1 r2)``.
    """
    if rank_budget < 2 or rank_budget % 2:
        raise ParameterError(f"rank budget must be even and >= 2, got {rank_budget}")
    r = rank_budget // 2
    if r > min(m, n):
        raise ParameterError(f"per-pair rank {r} exceeds {min(m, n)}")
    if draws < 1:
        raise ParameterError("draws must be positive")
    s = abba_scale(alpha, r, r) if scale is None else float(scale)
    rng = rng_stream(seed, "moments", rank_budget)
    out_sum = grad_sum = 0.0
    for _ in range(draws):
        ad = AbbaAdapter(
            rng.standard_normal((m, r)), rng.standard_normal((r, n)),
            rng.standard_normal((m, r)), rng.standard_normal((r, n)), alpha,
        )
        delta = (s / ad.scale()) * ad.delta()
        x = rng.standard_normal((n, batch))
        g = rng.standard_normal((m, batch))
        out_sum += float(np.mean((delta @ x) ** 2))
        grad_sum += float(np.mean((delta.T @ g) ** 2))
    return MomentPoint(rank_budget, r, r, s, out_sum / draws, grad_sum / draws)


def rank_stability_profile(
    budgets=(4, 16, 64), constant_scale: bool = False, alpha: float = 1.0, **kw
) -> list[MomentPoint]:
    """Moments across ``budgets``; with ``constant_scale`` the first budget's scale is reused."""
    budgets = list(budgets)
    fixed = abba_scale(alpha, budgets[0] // 2, budgets[0] // 2) if constant_scale else None
    return [adapter_moments(b, alpha=alpha, scale=fixed, **kw) for b in budgets]


def spread(points: list[MomentPoint], attr: str = "output_moment") -> float:
    """Largest over smallest value of ``attr`` across the profile."""
    values = [getattr(p, attr) for p in points]
    return max(values) / min(values)
