"""Closed-form gradients for the adapters, plus a finite-difference oracle.

The upstream gradient ``G`` is the gradient of the loss with respect to the
materialized update ``dW``. For a linear layer ``y = w0 x + dW x`` this is
``G = g_y x^T``, formed by :func:`layer_backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapters import AbbaAdapter, AbbaChain, HiraAdapter, LoraAdapter, abba_delta_kr
from .errors import NumericError, ParameterError, ShapeError
from .linalg import Matrix, as_matrix

FACTORS = ("b1", "a1", "b2", "a2")


@dataclass
class AdapterGradients:
    g_b1: Matrix
    g_a1: Matrix
    g_b2: Matrix
    g_a2: Matrix

    def as_dict(self) -> dict[str, Matrix]:
        return {"b1": self.g_b1, "a1": self.g_a1, "b2": self.g_b2, "a2": self.g_a2}

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.as_dict().values())))


def _check_upstream(shape: tuple[int, int], g: Matrix) -> Matrix:
    g = as_matrix(g, "upstream gradient")
    if g.shape != shape:
        raise ShapeError(f"upstream gradient is {g.shape} but the update is {shape}")
    return g


def abba_backward(ad: AbbaAdapter, g: Matrix) -> AdapterGradients:
    g = _check_upstream(ad.shape, g)
    s = ad.scale()
    m1 = ad.b1 @ ad.a1
    m2 = ad.b2 @ ad.a2
    g_through_1 = s * (g * m2)  # dL/dM1
    g_through_2 = s * (g * m1)  # dL/dM2
    return AdapterGradients(
        g_b1=g_through_1 @ ad.a1.T,
        g_a1=ad.b1.T @ g_through_1,
        g_b2=g_through_2 @ ad.a2.T,
        g_a2=ad.b2.T @ g_through_2,
    )


def layer_backward(ad: AbbaAdapter, w0: Matrix, x: Matrix, g_y: Matrix) -> tuple[AdapterGradients, Matrix]:
    """Gradients of ``y = w0 x + dW x`` given ``g_y = dL/dy``.

    Returns the factor gradients and ``dL/dx``; the input gradient goes
    through the Khatri-Rao factors rather than a materialized ``dW``.
    """
    w0 = as_matrix(w0, "w0")
    x = as_matrix(x, "x")
    g_y = as_matrix(g_y, "g_y")
    m, n = ad.shape
    if w0.shape != (m, n):
        raise ShapeError(f"base weight is {w0.shape} but the adapter update is {(m, n)}")
    if x.shape[0] != n or g_y.shape != (m, x.shape[1]):
        raise ShapeError(f"x is {x.shape} and g_y is {g_y.shape}; expected ({n}, B) and ({m}, B)")
    grads = abba_backward(ad, g_y @ x.T)
    b_kr, a_kr = abba_delta_kr(ad)
    g_x = w0.T @ g_y + a_kr.T @ (b_kr.T @ g_y)
    return grads, g_x


def lora_backward(ad: LoraAdapter, g: Matrix) -> tuple[Matrix, Matrix]:
    g = _check_upstream(ad.shape, g)
    s = ad.scale()
    return s * (g @ ad.a.T), s * (ad.b.T @ g)


def hira_backward(ad: HiraAdapter, g: Matrix) -> tuple[Matrix, Matrix]:
    g = _check_upstream(ad.shape, g)
    gm = ad.scale() * (g * ad.w0)
    return gm @ ad.a.T, ad.b.T @ gm


def chain_backward(c: AbbaChain, g: Matrix) -> list[tuple[Matrix, Matrix]]:
    """Per-pair ``(g_b, g_a)``; pair ``i`` sees ``s G`` times every other product."""
    g = _check_upstream(c.shape, g)
    s = c.scale()
    products = [b @ a for b, a in c.pairs]
    out = []
    for i, (b, a) in enumerate(c.pairs):
        gm = s * g
        for j, p in enumerate(products):
            if j != i:
                gm = gm * p
        out.append((gm @ a.T, b.T @ gm))
    return out


def finite_diff_gradient(loss: Callable[[np.ndarray], float], theta, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(L(t + h e_i) - L(t - h e_i)) / 2h`` per coordinate."""
    if not step > 0:
        raise ParameterError(f"step must be positive, got {step}")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + step
        up = loss(probe)
        probe[i] = theta[i] - step
        down = loss(probe)
        probe[i] = theta[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is not finite near coordinate {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad


# -- verification helpers ---------------------------------------------------


def flatten_abba(ad: AbbaAdapter) -> np.ndarray:
    return np.concatenate([getattr(ad, f).ravel() for f in FACTORS])


def unflatten_abba(theta: np.ndarray, like: AbbaAdapter) -> AbbaAdapter:
    parts, start = [], 0
    for f in FACTORS:
        shape = getattr(like, f).shape
        size = shape[0] * shape[1]
        parts.append(theta[start : start + size].reshape(shape))
        start += size
    return AbbaAdapter(*parts, alpha=like.alpha)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / (floor + np.abs(numeric))


@dataclass
class FactorCheck:
    factor: str
    max_rel_error: float
    index: tuple[int, int]


def check_abba_gradients(
    ad: AbbaAdapter,
    g: Matrix,
    step: float = 1e-5,
    backward: Callable[[AbbaAdapter, Matrix], AdapterGradients] = abba_backward,
) -> list[FactorCheck]:
    """Compare ``backward`` against central differences of ``<G, dW(theta)>``."""
    g = _check_upstream(ad.shape, g)

    # fsum keeps the unperturbed terms from adding round-off to the difference
    def loss(theta):
        return math.fsum((g * unflatten_abba(theta, ad).delta()).ravel())

    numeric = finite_diff_gradient(loss, flatten_abba(ad), step)
    analytic = backward(ad, g).as_dict()
    checks, start = [], 0
    for f in FACTORS:
        shape = getattr(ad, f).shape
        size = shape[0] * shape[1]
        err = relative_error(analytic[f], numeric[start : start + size].reshape(shape))
        idx = np.unravel_index(int(np.argmax(err)), shape)
        checks.append(FactorCheck(f, float(err[idx]), (int(idx[0]), int(idx[1]))))
        start += size
    return checks


def check_input_gradient(ad: AbbaAdapter, w0: Matrix, x: Matrix, g_y: Matrix, step: float = 1e-5) -> FactorCheck:
    """Compare ``dL/dx`` from :func:`layer_backward` against central differences of ``<g_y, y(x)>``."""
    x = as_matrix(x, "x")
    w_eff = w0 + ad.delta()

    # summing the individual products (not a matmul) makes the unperturbed
    # terms bit-identical in both evaluations, so they cancel exactly
    def loss(flat):
        xp = flat.reshape(x.shape)
        return math.fsum((g_y[:, None, :] * w_eff[:, :, None] * xp[None, :, :]).ravel())

    numeric = finite_diff_gradient(loss, x.ravel(), step).reshape(x.shape)
    _, g_x = layer_backward(ad, w0, x, g_y)
    err = relative_error(g_x, numeric)
    idx = np.unravel_index(int(np.argmax(err)), x.shape)
    return FactorCheck("x", float(err[idx]), (int(idx[0]), int(idx[1])))


def random_abba(rng: np.random.Generator, m: int, n: int, r1: int, r2: int, alpha: float = 1.0) -> AbbaAdapter:
    return AbbaAdapter(
        rng.standard_normal((m, r1)),
        rng.standard_normal((r1, n)),
        rng.standard_normal((m, r2)),
        rng.standard_normal((r2, n)),
        alpha,
    )
