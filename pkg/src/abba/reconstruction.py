"""Matrix reconstruction study: how well each parameterization fits a target.

LoRA and HiRA have closed forms (truncated SVD, directly or after dividing by
the base weight). The Hadamard form has none, so it is fitted with Adam over
all factors from several restarts; one restart starts from the rank-``r1``
SVD times an all-ones second pair, which makes the fit never worse than the
rank-``r1`` truncated SVD.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AbbaAdapter, AbbaChain, kaiming_uniform
from .errors import DomainError, NumericError, ParameterError
from .gradients import abba_backward, chain_backward
from .linalg import Matrix, as_matrix, frobenius_norm, singular_values, truncated_svd
from .optim import OptimizerSettings, make_optimizer
from .seeding import rng_stream

log = logging.getLogger(__name__)

FAMILY_TAGS = ("gaussian", "low_rank_plus_noise", "hadamard_structured", "diag_of_w0", "orthonormal")

CSV_COLUMNS = (
    "family",
    "m",
    "n",
    "seed",
    "method",
    "rank_budget",
    "r1",
    "r2",
    "error_fro",
    "error_fro_sq",
    "normalized_error",
    "iterations",
)


@dataclass(frozen=True)
class MatrixFamily:
    tag: str
    m: int = 128
    n: int = 128
    seed: int = 0
    rank: int = 48
    noise_sigma: float = 1.0
    r1: int = 4
    r2: int = 4

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise ParameterError(f"unknown matrix family {self.tag!r}; expected one of {FAMILY_TAGS}")
        if self.m < 1 or self.n < 1:
            raise ParameterError(f"dims must be positive, got {(self.m, self.n)}")
        if self.tag == "low_rank_plus_noise" and not (1 <= self.rank <= min(self.m, self.n) and self.noise_sigma >= 0):
            raise ParameterError(f"low_rank_plus_noise needs 1 <= rank <= {min(self.m, self.n)} and noise >= 0")
        if self.tag == "hadamard_structured" and not (self.r1 >= 1 and self.r2 >= 1):
            raise ParameterError("hadamard_structured needs r1, r2 >= 1")

    @property
    def label(self) -> str:
        if self.tag == "low_rank_plus_noise":
            return f"{self.tag}[rank={self.rank};noise_sigma={self.noise_sigma}]"
        if self.tag == "hadamard_structured":
            return f"{self.tag}[r1={self.r1};r2={self.r2}]"
        return self.tag


def generate(family: MatrixFamily) -> Matrix:
    """Deterministic target matrix for ``(tag, dims, seed)``."""
    rng = np.random.default_rng(family.seed)
    m, n = family.m, family.n
    if family.tag == "gaussian":
        return rng.standard_normal((m, n))
    if family.tag == "low_rank_plus_noise":
        u = rng.standard_normal((m, family.rank))
        v = rng.standard_normal((family.rank, n))
        return u @ v / math.sqrt(family.rank) + family.noise_sigma * rng.standard_normal((m, n))
    if family.tag == "hadamard_structured":
        return hadamard_target(rng, m, n, family.r1, family.r2)
    if family.tag == "diag_of_w0":
        w0 = rng.standard_normal((m, n))
        out = np.zeros((m, n))
        idx = np.arange(min(m, n))
        out[idx, idx] = w0[idx, idx]
        return out
    # orthonormal rows or columns, whichever fits
    q, _ = np.linalg.qr(rng.standard_normal((max(m, n), min(m, n))))
    return q if m >= n else q.T


def hadamard_target(rng: np.random.Generator, m: int, n: int, r1: int, r2: int) -> Matrix:
    return (rng.standard_normal((m, r1)) @ rng.standard_normal((r1, n))) * (
        rng.standard_normal((m, r2)) @ rng.standard_normal((r2, n))
    )


@dataclass
class ReconResult:
    method: str
    rank_budget: int
    error: float
    normalized_error: float
    iterations: int = 0
    seed: int = 0
    r1: int = 0
    r2: int = 0
    grad_norms: list[float] = field(default_factory=list, repr=False)

    @property
    def error_sq(self) -> float:
        return self.error * self.error


def _result(method, budget, error, target, **kw) -> ReconResult:
    norm = frobenius_norm(target)
    return ReconResult(method, budget, error, error / norm if norm > 0 else 0.0, **kw)


def lora_reconstruct(m: Matrix, r: int, seed: int = 0) -> ReconResult:
    m = as_matrix(m)
    if not 1 <= r <= min(m.shape):
        raise ParameterError(f"rank {r} out of range for a {m.shape} matrix")
    approx = truncated_svd(m, r, seed=seed).reconstruct()
    return _result("lora", r, frobenius_norm(m - approx), m, seed=seed, r1=r)


def hira_reconstruct(m: Matrix, w0: Matrix, r: int, seed: int = 0) -> ReconResult:
    """``w0 * SVD_r(m / w0)``; undefined when ``w0`` has a zero entry."""
    m = as_matrix(m)
    w0 = as_matrix(w0, "w0")
    if w0.shape != m.shape:
        raise ParameterError(f"w0 is {w0.shape} but the target is {m.shape}")
    if not 1 <= r <= min(m.shape):
        raise ParameterError(f"rank {r} out of range for a {m.shape} matrix")
    zeros = np.argwhere(w0 == 0)
    if zeros.size:
        raise DomainError(f"w0 has {len(zeros)} zero entries (first at {tuple(int(i) for i in zeros[0])}); m / w0 is undefined")
    approx = w0 * truncated_svd(m / w0, r, seed=seed).reconstruct()
    return _result("hira", r, frobenius_norm(m - approx), m, seed=seed, r1=r)


def bound_gap(m: Matrix, r: int) -> float:
    """``sum_{i=2r+1}^{r^2} sigma_i^2``, the known cap on ``E_LoRA,2r - E_ABBA,r``."""
    m = as_matrix(m)
    if r < 1 or r * r > min(m.shape):
        raise ParameterError(f"bound_gap needs 1 <= r and r^2 <= {min(m.shape)}, got r={r}")
    s = singular_values(m)
    return float(np.sum(s[2 * r : r * r] ** 2))


# -- iterative Hadamard fitting ---------------------------------------------


def _initial_pairs(kind: str, target: Matrix, ranks: list[int], rng: np.random.Generator, seed: int):
    m, n = target.shape
    k = len(ranks)
    if kind == "random":
        # small start: the update begins with ~1e-4 of the target's energy
        std = (1e-4 / math.prod(ranks)) ** (1.0 / (4 * k))
        return [(std * rng.standard_normal((m, r)), std * rng.standard_normal((r, n))) for r in ranks]
    first = truncated_svd(target, ranks[0], seed=seed).sqrt_factors()
    ones = [(np.full((m, r), 1 / math.sqrt(r)), np.full((r, n), 1 / math.sqrt(r))) for r in ranks[1:]]
    if kind == "svd_ones":
        return [first] + ones
    if kind == "ours":
        last = (np.zeros((m, ranks[-1])), kaiming_uniform(rng, ranks[-1], n))
        return [first] + ones[:-1] + [last]
    raise ParameterError(f"unknown restart kind {kind!r}; expected 'svd_ones', 'ours' or 'random'")


def _build(pairs, alpha):
    if len(pairs) == 2:
        (b1, a1), (b2, a2) = pairs
        return AbbaAdapter(b1, a1, b2, a2, alpha)
    return AbbaChain(pairs, alpha)


def _fit_once(target: Matrix, pairs, opt: OptimizerSettings, restart: int):
    ranks = [b.shape[1] for b, _ in pairs]
    k = len(ranks)
    # alpha chosen so the scale is exactly 1
    alpha = math.prod(ranks) ** (1.0 / (2 * k))
    model = _build(pairs, alpha)
    params = {}
    for i, (b, a) in enumerate(pairs):
        params[f"b{i}"] = b
        params[f"a{i}"] = a
    optimizer = make_optimizer(opt)
    best_loss, best_pairs, best_step = math.inf, None, 0
    grad_norms = []
    for step in range(opt.steps + 1):
        resid = target - model.delta()
        loss = float(np.sum(resid * resid))
        if not math.isfinite(loss):
            raise NumericError(f"restart {restart}: loss became non-finite at step {step}")
        if loss < best_loss:
            best_loss, best_step = loss, step
            best_pairs = [(b.copy(), a.copy()) for b, a in pairs]
        if step == opt.steps:
            break
        g = -2.0 * resid
        if k == 2:
            grads = abba_backward(model, g)
            per_pair = [(grads.g_b1, grads.g_a1), (grads.g_b2, grads.g_a2)]
        else:
            per_pair = chain_backward(model, g)
        grad_dict = {}
        for i, (gb, ga) in enumerate(per_pair):
            grad_dict[f"b{i}"] = gb
            grad_dict[f"a{i}"] = ga
        gnorm = math.sqrt(sum(float(np.sum(v * v)) for v in grad_dict.values()))
        if not math.isfinite(gnorm):
            raise NumericError(f"restart {restart}: gradient became non-finite at step {step}")
        grad_norms.append(gnorm)
        optimizer.step(params, grad_dict, opt.lr_at(step, opt.steps))
    return best_loss, best_pairs, best_step, alpha, grad_norms


@dataclass
class HadamardFit:
    model: AbbaAdapter | AbbaChain
    error: float
    iterations: int
    restart: int
    grad_norms: list[float]


def fit_hadamard(m: Matrix, ranks: list[int], opt: OptimizerSettings | None = None, seed: int = 0) -> HadamardFit:
    """Fit ``s (B1 A1) * ... * (Bk Ak)`` to ``m`` in Frobenius norm.

    The target is rescaled to unit RMS entry before fitting so the learning
    rate means the same thing for every matrix; errors are reported in the
    original units. Returns the best iterate over all steps and restarts.
    """
    opt = opt or OptimizerSettings()
    m = as_matrix(m)
    ranks = [int(r) for r in ranks]
    if len(ranks) < 2 or min(ranks) < 1 or max(ranks) > min(m.shape):
        raise ParameterError(f"ranks {ranks} invalid for a {m.shape} target")
    if not opt.restarts:
        raise ParameterError("at least one restart is required")
    rms = frobenius_norm(m) / math.sqrt(m.size)
    if rms == 0.0:
        zero = [(np.zeros((m.shape[0], r)), np.zeros((r, m.shape[1]))) for r in ranks]
        alpha = math.prod(ranks) ** (1.0 / (2 * len(ranks)))
        return HadamardFit(_build(zero, alpha), 0.0, 0, 0, [])
    target = m / rms
    best = None
    for idx, kind in enumerate(opt.restarts):
        rng = rng_stream(seed, "fit-restart", idx)
        pairs = _initial_pairs(kind, target, ranks, rng, seed)
        # divergence is detected and reported by _fit_once itself
        with np.errstate(over="ignore", invalid="ignore"):
            loss, pairs, step, alpha, norms = _fit_once(target, pairs, opt, idx)
        log.debug("restart %d (%s): loss %.6g at step %d", idx, kind, loss, step)
        if best is None or loss < best[0]:
            best = (loss, pairs, step, alpha, norms, idx)
    loss, pairs, step, alpha, norms, idx = best
    # fold the normalization back into the first pair
    pairs = [(pairs[0][0] * rms, pairs[0][1])] + pairs[1:]
    return HadamardFit(_build(pairs, alpha), math.sqrt(loss) * rms, step, idx, norms)


def abba_reconstruct(m: Matrix, r1: int, r2: int, opt: OptimizerSettings | None = None, seed: int = 0) -> ReconResult:
    fit = fit_hadamard(m, [r1, r2], opt, seed)
    return _result(
        "abba", r1 + r2, fit.error, as_matrix(m), iterations=fit.iterations, seed=seed, r1=r1, r2=r2,
        grad_norms=fit.grad_norms,
    )


# -- experiment grid --------------------------------------------------------


@dataclass
class ReconConfig:
    families: list[dict] = field(default_factory=lambda: [{"tag": "gaussian"}, {"tag": "low_rank_plus_noise"}])
    dims: tuple[int, int] = (128, 128)
    budgets: list[int] = field(default_factory=lambda: [8, 16, 32])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerSettings(**self.optimizer)
        self.dims = tuple(self.dims)
        if any(b < 2 or b % 2 for b in self.budgets):
            raise ParameterError(f"rank budgets must be even and >= 2 so r1 = r2 = r/2, got {self.budgets}")
        if not self.seeds:
            raise ParameterError("at least one seed is required")
        for fam in self.families:
            MatrixFamily(**{**fam, "m": self.dims[0], "n": self.dims[1]})


@dataclass(frozen=True)
class GridRow:
    family: str
    m: int
    n: int
    seed: int
    method: str
    rank_budget: int
    r1: int
    r2: int
    error_fro: float
    error_fro_sq: float
    normalized_error: float
    iterations: int

    def values(self) -> list[str]:
        return [
            self.family, str(self.m), str(self.n), str(self.seed), self.method, str(self.rank_budget),
            str(self.r1), str(self.r2), repr(self.error_fro), repr(self.error_fro_sq),
            repr(self.normalized_error), str(self.iterations),
        ]


def _row(family: MatrixFamily, res: ReconResult) -> GridRow:
    return GridRow(
        family.label, family.m, family.n, family.seed, res.method, res.rank_budget, res.r1, res.r2,
        float(res.error), float(res.error_sq), float(res.normalized_error), int(res.iterations),
    )


def _csv_line(values) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(values)
    return buf.getvalue()


def run_grid(config: ReconConfig, out_path: str | Path | None = None) -> list[GridRow]:
    """Run every (family, seed, budget, method) cell in canonical order.

    Rows are written and flushed as they complete, so an error part-way
    leaves the finished cells on disk.
    """
    m, n = config.dims
    cells = sorted(
        ((MatrixFamily(**{**fam, "m": m, "n": n, "seed": seed}), budget)
         for fam in config.families for seed in config.seeds for budget in config.budgets),
        key=lambda c: (c[0].label, c[0].seed, c[1]),
    )
    rows: list[GridRow] = []
    handle = open(out_path, "w", encoding="utf-8", newline="") if out_path is not None else None
    try:
        if handle:
            handle.write(_csv_line(CSV_COLUMNS))
            handle.flush()
        cache: dict[MatrixFamily, Matrix] = {}
        for family, budget in cells:
            target = cache.setdefault(family, generate(family))
            half = budget // 2
            for res in (
                abba_reconstruct(target, half, half, config.optimizer, seed=family.seed),
                lora_reconstruct(target, budget, seed=family.seed),
            ):
                row = _row(family, res)
                rows.append(row)
                if handle:
                    handle.write(_csv_line(row.values()))
                    handle.flush()
    finally:
        if handle:
            handle.close()
    return rows


def read_grid_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def abba_win_fractions(rows: list[GridRow]) -> dict[str, float]:
    """Per family: fraction of (budget, seed) cells where ABBA beats LoRA."""
    lora = {(r.family, r.seed, r.rank_budget): r.error_fro for r in rows if r.method == "lora"}
    wins: dict[str, list[bool]] = {}
    for r in rows:
        if r.method == "abba":
            key = (r.family, r.seed, r.rank_budget)
            if key in lora:
                wins.setdefault(r.family, []).append(r.error_fro < lora[key])
    return {fam: sum(w) / len(w) for fam, w in wins.items()}
