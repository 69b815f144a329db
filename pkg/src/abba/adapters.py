"""Adapter parameterizations: LoRA, HiRA, ABBA and chained ABBA.

Every adapter stores its factors unscaled; the scale is applied when the
update is materialized or applied to an input. Adapters are plain mutable
values. Reading (``delta``, forward passes, merging) is safe from several
threads at once, but in-place parameter updates need a single writer per
adapter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .linalg import Matrix, as_matrix, khatri_rao_rows, truncated_svd
from .seeding import rng_stream


class ScaleMode(str, enum.Enum):
    STANDARD = "standard"  # alpha / r
    RANK_STABILIZED = "rank_stabilized"  # alpha / sqrt(r)


class InitStrategy(str, enum.Enum):
    """The six ABBA initializations compared in the initialization ablation.

    ``SVD_FIRST_LORA_SECOND`` is the default: the first pair holds the top
    singular components of the base weight, the second pair starts as a
    LoRA pair (``B2 = 0``, ``A2`` Kaiming-uniform), so the update is zero at
    step 0.
    """

    ONES_SCALED_PAIR2 = "ones_scaled_pair2"
    SQRT_SVD_BOTH = "sqrt_svd_both"
    SQRT_SVD_SPLIT_12 = "sqrt_svd_split_12"
    SQRT_SVD_SPLIT_21 = "sqrt_svd_split_21"
    SVD_SECOND_LORA_FIRST = "svd_second_lora_first"
    SVD_FIRST_LORA_SECOND = "svd_first_lora_second"


OURS = InitStrategy.SVD_FIRST_LORA_SECOND


def _check_pair(b: Matrix, a: Matrix, label: str) -> tuple[Matrix, Matrix]:
    b = as_matrix(b, f"{label} B")
    a = as_matrix(a, f"{label} A")
    if b.shape[1] != a.shape[0]:
        raise ShapeError(f"{label}: B is {b.shape} but A is {a.shape}; inner ranks differ")
    return b, a


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not alpha > 0 or not math.isfinite(alpha):
        raise ParameterError(f"alpha must be a positive finite number, got {alpha}")
    return alpha


def abba_scale(alpha: float, r1: int, r2: int) -> float:
    """``alpha**2 / sqrt(r1 * r2)``, the rank-stable ABBA scale."""
    if r1 < 1 or r2 < 1:
        raise ParameterError(f"ranks must be >= 1, got r1={r1}, r2={r2}")
    return _check_alpha(alpha) ** 2 / math.sqrt(r1 * r2)


@dataclass
class LoraAdapter:
    b: Matrix
    a: Matrix
    alpha: float
    scale_mode: ScaleMode = ScaleMode.STANDARD

    def __post_init__(self):
        self.b, self.a = _check_pair(self.b, self.a, "LoRA")
        self.alpha = _check_alpha(self.alpha)
        self.scale_mode = ScaleMode(self.scale_mode)

    @property
    def r(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def scale(self) -> float:
        if self.scale_mode is ScaleMode.RANK_STABILIZED:
            return self.alpha / math.sqrt(self.r)
        return self.alpha / self.r

    def delta(self) -> Matrix:
        return self.scale() * (self.b @ self.a)

    def apply(self, x: Matrix) -> Matrix:
        return self.scale() * (self.b @ (self.a @ x))

    def num_parameters(self) -> int:
        return self.b.size + self.a.size


@dataclass
class HiraAdapter:
    """``dW = w0 * (s B A)`` with ``s = alpha / r`` and ``w0`` frozen."""

    w0: Matrix
    b: Matrix
    a: Matrix
    alpha: float

    def __post_init__(self):
        self.b, self.a = _check_pair(self.b, self.a, "HiRA")
        self.w0 = as_matrix(self.w0, "HiRA w0")
        if self.w0.shape != (self.b.shape[0], self.a.shape[1]):
            raise ShapeError(f"HiRA: w0 is {self.w0.shape} but B A is {(self.b.shape[0], self.a.shape[1])}")
        self.alpha = _check_alpha(self.alpha)

    @property
    def r(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def scale(self) -> float:
        return self.alpha / self.r

    def delta(self) -> Matrix:
        return self.w0 * (self.scale() * (self.b @ self.a))

    def apply(self, x: Matrix) -> Matrix:
        return self.delta() @ x

    def num_parameters(self) -> int:
        return self.b.size + self.a.size


@dataclass
class AbbaAdapter:
    b1: Matrix
    a1: Matrix
    b2: Matrix
    a2: Matrix
    alpha: float

    def __post_init__(self):
        self.b1, self.a1 = _check_pair(self.b1, self.a1, "ABBA pair 1")
        self.b2, self.a2 = _check_pair(self.b2, self.a2, "ABBA pair 2")
        s1 = (self.b1.shape[0], self.a1.shape[1])
        s2 = (self.b2.shape[0], self.a2.shape[1])
        if s1 != s2:
            raise ShapeError(f"ABBA: B1 A1 is {s1} but B2 A2 is {s2}")
        self.alpha = _check_alpha(self.alpha)

    @property
    def r1(self) -> int:
        return self.b1.shape[1]

    @property
    def r2(self) -> int:
        return self.b2.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.b1.shape[0], self.a1.shape[1]

    def scale(self) -> float:
        return abba_scale(self.alpha, self.r1, self.r2)

    def delta(self) -> Matrix:
        return abba_delta_naive(self)

    def apply(self, x: Matrix) -> Matrix:
        b_kr, a_kr = abba_delta_kr(self)
        return b_kr @ (a_kr @ x)

    def num_parameters(self) -> int:
        return self.b1.size + self.a1.size + self.b2.size + self.a2.size

    def swapped(self) -> "AbbaAdapter":
        return AbbaAdapter(self.b2, self.a2, self.b1, self.a1, self.alpha)


@dataclass
class AbbaChain:
    """Hadamard product of ``k >= 2`` low-rank pairs.

    The scale generalizes the two-pair case to ``alpha**k / sqrt(prod r_i)``.
    """

    pairs: list[tuple[Matrix, Matrix]] = field(default_factory=list)
    alpha: float = 1.0

    def __post_init__(self):
        if len(self.pairs) < 2:
            raise ParameterError(f"a chain needs at least 2 pairs, got {len(self.pairs)}")
        self.pairs = [_check_pair(b, a, f"chain pair {i}") for i, (b, a) in enumerate(self.pairs)]
        shapes = {(b.shape[0], a.shape[1]) for b, a in self.pairs}
        if len(shapes) != 1:
            raise ShapeError(f"chain pair products have different shapes: {sorted(shapes)}")
        self.alpha = _check_alpha(self.alpha)

    @property
    def k(self) -> int:
        return len(self.pairs)

    @property
    def ranks(self) -> list[int]:
        return [b.shape[1] for b, _ in self.pairs]

    @property
    def shape(self) -> tuple[int, int]:
        b, a = self.pairs[0]
        return b.shape[0], a.shape[1]

    def scale(self) -> float:
        return self.alpha**self.k / math.sqrt(math.prod(self.ranks))

    def delta(self) -> Matrix:
        return chain_delta(self)

    def apply(self, x: Matrix) -> Matrix:
        return self.delta() @ x

    def num_parameters(self) -> int:
        return sum(b.size + a.size for b, a in self.pairs)


def abba_delta_naive(ad: AbbaAdapter) -> Matrix:
    """Materialize ``s (B1 A1) * (B2 A2)``. Reference path for tests."""
    return ad.scale() * ((ad.b1 @ ad.a1) * (ad.b2 @ ad.a2))


def abba_delta_kr(ad: AbbaAdapter) -> tuple[Matrix, Matrix]:
    """Factored update ``(b_kr, a_kr)`` with ``b_kr @ a_kr == dW``.

    ``b_kr`` is ``m x r1 r2`` and carries the scale; ``a_kr`` is ``r1 r2 x n``.
    """
    b_kr = ad.scale() * khatri_rao_rows(ad.b1, ad.b2)
    a_kr = khatri_rao_rows(ad.a1.T, ad.a2.T).T
    return b_kr, a_kr


def abba_forward(ad: AbbaAdapter, w0: Matrix, x: Matrix) -> Matrix:
    """``w0 x + dW x`` through the Khatri-Rao factors; ``x`` is ``n x batch``."""
    w0 = as_matrix(w0, "w0")
    x = as_matrix(x, "x")
    if w0.shape != ad.shape:
        raise ShapeError(f"base weight is {w0.shape} but the adapter update is {ad.shape}")
    if x.shape[0] != w0.shape[1]:
        raise ShapeError(f"input is {x.shape}, expected {w0.shape[1]} rows")
    b_kr, a_kr = abba_delta_kr(ad)
    return w0 @ x + b_kr @ (a_kr @ x)


def lora_delta(ad: LoraAdapter) -> Matrix:
    return ad.delta()


def hira_delta(ad: HiraAdapter) -> Matrix:
    return ad.delta()


def chain_delta(c: AbbaChain) -> Matrix:
    out = None
    for b, a in c.pairs:
        out = b @ a if out is None else out * (b @ a)
    return c.scale() * out


def merge(ad, w0: Matrix) -> Matrix:
    """``w0 + dW`` for any adapter type."""
    w0 = as_matrix(w0, "w0")
    if w0.shape != ad.shape:
        raise ShapeError(f"base weight is {w0.shape} but the adapter update is {ad.shape}")
    return w0 + ad.delta()


def unmerge(w_merged: Matrix, ad) -> Matrix:
    w_merged = as_matrix(w_merged, "merged weight")
    if w_merged.shape != ad.shape:
        raise ShapeError(f"merged weight is {w_merged.shape} but the adapter update is {ad.shape}")
    return w_merged - ad.delta()


# -- initialization ---------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, rows: int, cols: int, bound: float | None = None) -> Matrix:
    """Uniform(-b, b) with ``b = sqrt(1 / cols)`` unless given."""
    if bound is None:
        bound = math.sqrt(1.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def signed_sqrt(w: Matrix) -> Matrix:
    return np.sign(w) * np.sqrt(np.abs(w))


def _svd_pair(svd, start: int, stop: int) -> tuple[Matrix, Matrix]:
    root = np.sqrt(svd.sigma[start:stop])
    return svd.u[:, start:stop] * root, root[:, None] * svd.vt[start:stop]


def init_abba(
    w0: Matrix,
    r1: int,
    r2: int,
    strategy: InitStrategy | str = OURS,
    seed: int = 0,
    alpha: float = 16.0,
    kaiming_bound: float | None = None,
) -> AbbaAdapter:
    w0 = as_matrix(w0, "w0")
    m, n = w0.shape
    strategy = InitStrategy(strategy)
    limit = min(m, n)
    if not (1 <= r1 <= limit and 1 <= r2 <= limit):
        raise ParameterError(f"ranks r1={r1}, r2={r2} must lie in [1, {limit}] for a {w0.shape} weight")
    split = strategy in (InitStrategy.SQRT_SVD_SPLIT_12, InitStrategy.SQRT_SVD_SPLIT_21)
    if split and r1 + r2 > limit:
        raise ParameterError(f"split initialization needs r1 + r2 <= {limit}, got {r1 + r2}")
    rng = rng_stream(seed, "adapter-init")

    if strategy is InitStrategy.SVD_FIRST_LORA_SECOND:
        b1, a1 = truncated_svd(w0, r1, seed=seed).sqrt_factors()
        b2 = np.zeros((m, r2))
        a2 = kaiming_uniform(rng, r2, n, kaiming_bound)
    elif strategy is InitStrategy.SVD_SECOND_LORA_FIRST:
        b2, a2 = truncated_svd(w0, r2, seed=seed).sqrt_factors()
        b1 = np.zeros((m, r1))
        a1 = kaiming_uniform(rng, r1, n, kaiming_bound)
    elif strategy is InitStrategy.ONES_SCALED_PAIR2:
        b1, a1 = truncated_svd(w0, r1, seed=seed).sqrt_factors()
        c = 1.0 / math.sqrt(r2)
        b2 = np.full((m, r2), c)
        a2 = np.full((r2, n), c)
    else:
        root = signed_sqrt(w0)
        if strategy is InitStrategy.SQRT_SVD_BOTH:
            svd = truncated_svd(root, max(r1, r2), seed=seed)
            b1, a1 = _svd_pair(svd, 0, r1)
            b2, a2 = _svd_pair(svd, 0, r2)
        else:
            svd = truncated_svd(root, r1 + r2, seed=seed)
            if strategy is InitStrategy.SQRT_SVD_SPLIT_12:
                b1, a1 = _svd_pair(svd, 0, r1)
                b2, a2 = _svd_pair(svd, r1, r1 + r2)
            else:
                b2, a2 = _svd_pair(svd, 0, r2)
                b1, a1 = _svd_pair(svd, r2, r2 + r1)
    return AbbaAdapter(b1, a1, b2, a2, alpha)


def init_lora(
    w0: Matrix,
    r: int,
    seed: int = 0,
    alpha: float = 16.0,
    scale_mode: ScaleMode | str = ScaleMode.STANDARD,
) -> LoraAdapter:
    m, n = as_matrix(w0, "w0").shape
    if not 1 <= r <= min(m, n):
        raise ParameterError(f"rank {r} out of range for a {(m, n)} weight")
    rng = rng_stream(seed, "adapter-init")
    return LoraAdapter(np.zeros((m, r)), kaiming_uniform(rng, r, n), alpha, scale_mode)


def init_hira(w0: Matrix, r: int, seed: int = 0, alpha: float = 16.0) -> HiraAdapter:
    w0 = as_matrix(w0, "w0")
    m, n = w0.shape
    if not 1 <= r <= min(m, n):
        raise ParameterError(f"rank {r} out of range for a {(m, n)} weight")
    rng = rng_stream(seed, "adapter-init")
    return HiraAdapter(w0, np.zeros((m, r)), kaiming_uniform(rng, r, n), alpha)


def init_chain(w0: Matrix, k: int, rank_budget: int, seed: int = 0, alpha: float = 16.0) -> AbbaChain:
    """SVD-seeded leading pairs and a zero-``B`` trailing pair, each of rank ``budget / k``.

    The leading pairs take consecutive blocks of the base weight's singular
    components; the trailing LoRA-style pair keeps the update zero at step 0.
    """
    w0 = as_matrix(w0, "w0")
    m, n = w0.shape
    if k < 2:
        raise ParameterError(f"a chain needs k >= 2, got {k}")
    if rank_budget % k:
        raise ParameterError(f"rank budget {rank_budget} is not divisible by k={k}")
    r = rank_budget // k
    if r < 1 or r * (k - 1) > min(m, n):
        raise ParameterError(f"per-pair rank {r} with k={k} does not fit a {w0.shape} weight")
    rng = rng_stream(seed, "adapter-init")
    svd = truncated_svd(w0, r * (k - 1), seed=seed)
    pairs = [_svd_pair(svd, i * r, (i + 1) * r) for i in range(k - 1)]
    pairs.append((np.zeros((m, r)), kaiming_uniform(rng, r, n)))
    return AbbaChain(pairs, alpha)


def trainable_parameters(ad) -> int:
    return ad.num_parameters()
