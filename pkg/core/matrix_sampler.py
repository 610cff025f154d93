"""
Matrix Sampler
Samples T-correlated random matrices, assembles W = sqrt(S) * X and V = sqrt(S * S^T) * T,
adds rank-one spikes and estimates spectral norms by power iteration
"""

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import LinearOperator
from scipy.special import gamma, ndtr

from core.errors import DimensionMismatchError, UnattainableCorrelationError, UnknownFamilyError
from core.profiles import AssumptionCheck, CorrelationProfile, VarianceProfile, make_dense_profile
from utils.logger import get_logger

logger = get_logger("core.matrix_sampler")

# unordered pairs per counter block; block 0 is reserved for the diagonal
PAIRS_PER_BLOCK = 1 << 20

# orders k at which C_mom(k) is checked against MOMENT_GROWTH_CONSTANT * k^(nu/2);
# sqrt(3) bounds every bounded family and sqrt(k/e) < sqrt(k) holds for the Gaussian
MOMENT_ORDERS = (2, 4, 8, 16)
MOMENT_GROWTH_CONSTANT = math.sqrt(3.0)


class EntryFamily(str, Enum):
    """Standardized entry distributions (mean 0, variance 1)"""
    GAUSSIAN = "standard-gaussian"
    RADEMACHER = "rademacher"
    UNIFORM = "centered-uniform"


@dataclass(frozen=True)
class EntryDistribution:
    """Entry law of X with its moment growth exponent nu"""
    family: EntryFamily = EntryFamily.GAUSSIAN

    @classmethod
    def from_name(cls, name: str) -> "EntryDistribution":
        try:
            return cls(EntryFamily(name))
        except ValueError:
            raise UnknownFamilyError(f"Unknown entry distribution '{name}'") from None

    @property
    def nu(self) -> float:
        # Gaussian L^k norms grow like sqrt(k); bounded families have bounded moments
        return 1.0 if self.family == EntryFamily.GAUSSIAN else 0.0

    @property
    def attainable_range(self) -> Tuple[float, float]:
        return (-1.0, 1.0)

    def moment(self, k: int) -> float:
        """E|X|^k in closed form"""
        if self.family == EntryFamily.GAUSSIAN:
            return float(2 ** (k / 2) * gamma((k + 1) / 2) / math.sqrt(math.pi))
        if self.family == EntryFamily.RADEMACHER:
            return 1.0
        return float(3 ** (k / 2) / (k + 1))

    def moment_constant(self, k: int) -> float:
        """C_mom(k) = (E|X|^k)^(1/k)"""
        return self.moment(k) ** (1.0 / k)

    def moment_checks(self, orders: Iterable[int] = MOMENT_ORDERS,
                      constant: float = MOMENT_GROWTH_CONSTANT) -> List[AssumptionCheck]:
        """C_mom(k) <= constant * k^(nu/2) for each order k"""
        checks = []
        for k in orders:
            threshold = constant * k ** (self.nu / 2)
            value = self.moment_constant(k)
            checks.append(AssumptionCheck(name=f"moment_constant:k{k}", passed=value <= threshold,
                                          value=value, threshold=threshold,
                                          detail=f"{self.family.value}, nu={self.nu:g}"))
        return checks

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Independent standardized entries"""
        if self.family == EntryFamily.GAUSSIAN:
            return rng.standard_normal(size)
        if self.family == EntryFamily.RADEMACHER:
            return 2.0 * rng.integers(0, 2, size=size) - 1.0
        return math.sqrt(3.0) * (2.0 * rng.random(size) - 1.0)

    def draw_pairs(self, rng: np.random.Generator,
                   tau: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(X_ij, X_ji) for i < j with unit marginals and correlation tau"""
        m = tau.size
        if self.family == EntryFamily.GAUSSIAN:
            g = rng.standard_normal((m, 2))
            return g[:, 0], tau * g[:, 0] + np.sqrt(1.0 - tau ** 2) * g[:, 1]

        if self.family == EntryFamily.RADEMACHER:
            first = 2.0 * rng.integers(0, 2, size=m) - 1.0
            keep = rng.random(m) < (1.0 + tau) / 2.0
            return first, np.where(keep, first, -first)

        # Gaussian copula: Pearson correlation of the uniform marginals is (6/pi) asin(rho_g / 2)
        rho_g = 2.0 * np.sin(np.pi * tau / 6.0)
        g = rng.standard_normal((m, 2))
        g2 = rho_g * g[:, 0] + np.sqrt(np.clip(1.0 - rho_g ** 2, 0.0, None)) * g[:, 1]
        scale = math.sqrt(3.0)
        return scale * (2.0 * ndtr(g[:, 0]) - 1.0), scale * (2.0 * ndtr(g2) - 1.0)


def _stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed).jumped(block))


@dataclass(frozen=True, eq=False)
class SampledMatrix:
    """
    Sparse sample of W aligned with the support of S.
    Immutable once built; products are read-only.
    """
    matrix: sparse.csr_array
    seed: int
    variance_id: str
    correlation_id: str
    family: str = EntryFamily.GAUSSIAN.value

    @classmethod
    def from_matrix(cls, matrix, seed: int = 0, label: str = "deterministic") -> "SampledMatrix":
        """Wrap a deterministic matrix (tests, LV interaction matrices)"""
        csr = sparse.csr_array(matrix, dtype=np.float64, copy=True)
        if csr.shape[0] != csr.shape[1]:
            raise DimensionMismatchError(f"Matrix must be square, got {csr.shape}")
        csr.eliminate_zeros()
        csr.sort_indices()
        return cls(matrix=csr, seed=seed, variance_id=label, correlation_id=label, family=label)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def matrix_id(self) -> str:
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(self.matrix.indptr, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.matrix.indices, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.matrix.data, dtype=np.float64).tobytes())
        return f"W-{digest.hexdigest()[:12]}"

    @cached_property
    def hadamard_transpose(self) -> sparse.csr_array:
        """W * W^T (elementwise), supported on the symmetric part of the support"""
        product = sparse.csr_array(self.matrix.multiply(self.matrix.T))
        product.eliminate_zeros()
        return product

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix.T @ x

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.matvec, rmatvec=self.rmatvec,
                              dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def recover_x(self, profile: VarianceProfile) -> sparse.csr_array:
        """X on the support of S, as W_ij / sqrt(s_ij)"""
        return sparse.csr_array(self.matrix.multiply(profile.matrix.power(-0.5)))

    def to_triplet_text(self) -> str:
        coo = self.matrix.tocoo()
        support = int(np.diff(self.matrix.indptr).max(initial=0))
        zero_diagonal = int(not np.any(self.matrix.diagonal() != 0))
        lines = [f"{self.n} {max(support, 1)} {zero_diagonal}"]
        lines.extend(f"{r} {c} {v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_triplet_text(cls, text: str, seed: int = 0, label: str = "file") -> "SampledMatrix":
        """Reads a dump written by to_triplet_text; the header support count is not enforced"""
        lines = [line for line in text.splitlines() if line.strip()]
        n = int(lines[0].split()[0])
        if len(lines) > 1:
            body = np.array([line.split() for line in lines[1:]], dtype=float)
            rows, cols, vals = body[:, 0].astype(int), body[:, 1].astype(int), body[:, 2]
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
        return cls.from_matrix(sparse.coo_array((vals, (rows, cols)), shape=(n, n)),
                               seed=seed, label=label)


@dataclass(frozen=True, eq=False)
class SpikedMatrix:
    """A = strength * u v^T + W, never densified"""
    base: SampledMatrix
    strength: float
    u: np.ndarray
    v: np.ndarray

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def matrix_id(self) -> str:
        digest = hashlib.sha1()
        digest.update(self.base.matrix_id.encode())
        digest.update(np.float64(self.strength).tobytes())
        digest.update(np.ascontiguousarray(self.u, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(self.v, dtype=np.float64).tobytes())
        return f"A-{digest.hexdigest()[:12]}"

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.strength * self.u * np.dot(self.v, x) + self.base.matvec(x)

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self.strength * self.v * np.dot(self.u, x) + self.base.rmatvec(x)

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.matvec, rmatvec=self.rmatvec,
                              dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        return self.strength * np.outer(self.u, self.v) + self.base.to_dense()


def sample_t_correlated(S: VarianceProfile, T: CorrelationProfile,
                        dist: Optional[EntryDistribution] = None, seed: int = 0) -> SampledMatrix:
    """
    Sample W = sqrt(S) * X for a T-correlated X.

    Unordered pairs {i, j} touching the support of S are enumerated in sorted
    (min, max) order and drawn from counter blocks of PAIRS_PER_BLOCK pairs; the
    diagonal uses block 0. The sample therefore depends only on (S, T, dist, seed).
    """
    dist = dist or EntryDistribution()
    n = S.n
    if T.n != n:
        raise DimensionMismatchError(f"Variance profile has n={n}, correlation profile n={T.n}")

    coo = S.matrix.tocoo()
    rows = coo.row.astype(np.int64)
    cols = coo.col.astype(np.int64)
    values = np.empty(rows.size)

    diag = rows == cols
    if np.any(diag):
        x_diag = dist.draw(_stream(seed, 0), n)
        values[diag] = x_diag[rows[diag]]

    off = ~diag
    lo = np.minimum(rows[off], cols[off])
    hi = np.maximum(rows[off], cols[off])
    keys = lo * n + hi
    pair_keys = np.unique(keys)
    tau = T.values(pair_keys // n, pair_keys % n)

    low, high = dist.attainable_range
    if tau.size and (tau.min() < low or tau.max() > high):
        raise UnattainableCorrelationError(
            f"{dist.family.value} entries cannot realize correlations outside [{low}, {high}]")

    first = np.empty(pair_keys.size)
    second = np.empty(pair_keys.size)
    for block, start in enumerate(range(0, pair_keys.size, PAIRS_PER_BLOCK), start=1):
        stop = min(start + PAIRS_PER_BLOCK, pair_keys.size)
        first[start:stop], second[start:stop] = dist.draw_pairs(_stream(seed, block), tau[start:stop])

    slot = np.searchsorted(pair_keys, keys)
    values[off] = np.where(rows[off] < cols[off], first[slot], second[slot])

    matrix = sparse.csr_array((np.sqrt(coo.data) * values, (rows, cols)), shape=(n, n))
    matrix.sort_indices()
    logger.debug(f"Sampled {dist.family.value} matrix n={n} nnz={matrix.nnz} "
                 f"pairs={pair_keys.size} seed={seed}")
    return SampledMatrix(matrix=matrix, seed=seed, variance_id=S.profile_id,
                         correlation_id=T.profile_id, family=dist.family.value)


def sample_dense_batch(S: VarianceProfile, T: CorrelationProfile, batch: int,
                       rng: np.random.Generator,
                       dist: Optional[EntryDistribution] = None) -> np.ndarray:
    """(batch, n, n) stack of dense W = sqrt(S) * X samples, for small n Monte Carlo"""
    dist = dist or EntryDistribution()
    n = S.n
    if T.n != n:
        raise DimensionMismatchError(f"Variance profile has n={n}, correlation profile n={T.n}")
    lo, hi = np.triu_indices(n, k=1)
    tau = T.values(lo, hi)
    low, high = dist.attainable_range
    if tau.size and (tau.min() < low or tau.max() > high):
        raise UnattainableCorrelationError(
            f"{dist.family.value} entries cannot realize correlations outside [{low}, {high}]")

    X = np.empty((batch, n, n))
    first, second = dist.draw_pairs(rng, np.tile(tau, batch))
    X[:, lo, hi] = first.reshape(batch, -1)
    X[:, hi, lo] = second.reshape(batch, -1)
    diagonal = np.arange(n)
    X[:, diagonal, diagonal] = dist.draw(rng, batch * n).reshape(batch, n)
    return np.sqrt(S.to_dense())[None] * X


def compute_v(S: VarianceProfile, T: CorrelationProfile) -> sparse.csr_array:
    """V_ij = tau_ij sqrt(s_ij s_ji), with tau_ii read as 1"""
    if S.n != T.n:
        raise DimensionMismatchError(f"Variance profile has n={S.n}, correlation profile n={T.n}")
    geometric = sparse.csr_array(S.matrix.multiply(S.matrix.T)).sqrt().tocoo()
    tau = T.values(geometric.row, geometric.col)
    V = sparse.csr_array((geometric.data * tau, (geometric.row, geometric.col)), shape=(S.n, S.n))
    V.eliminate_zeros()
    V.sort_indices()
    return V


def add_rank_one(base: SampledMatrix, strength: float, u, v) -> SpikedMatrix:
    u = np.array(u, dtype=float)
    v = np.array(v, dtype=float)
    if u.shape != (base.n,) or v.shape != (base.n,):
        raise DimensionMismatchError(
            f"Spike vectors must have length {base.n}, got {u.shape} and {v.shape}")
    u.setflags(write=False)
    v.setflags(write=False)
    return SpikedMatrix(base=base, strength=float(strength), u=u, v=v)


@dataclass(frozen=True)
class SpectralNormEstimate:
    estimate: float
    iterations: int
    converged: bool


def estimate_spectral_norm(M, max_iters: int = 500, tol: float = 1e-10,
                           seed: int = 0) -> SpectralNormEstimate:
    """
    Largest singular value by power iteration on M^T M.

    Args:
        M: SampledMatrix, SpikedMatrix or anything exposing as_linear_operator()
        max_iters: iteration cap
        tol: relative change of the estimate that counts as converged
        seed: seed of the random start vector

    Returns:
        SpectralNormEstimate with the running maximum, so the estimate never decreases
    """
    if max_iters < 1 or tol <= 0:
        raise ValueError("estimate_spectral_norm needs max_iters >= 1 and tol > 0")

    op = M.as_linear_operator()
    x = np.random.default_rng(seed).standard_normal(op.shape[1])
    x /= np.linalg.norm(x)

    best = 0.0
    for iteration in range(1, max_iters + 1):
        y = op.matvec(x)
        current = float(np.linalg.norm(y))
        previous, best = best, max(best, current)
        if current == 0.0:
            return SpectralNormEstimate(estimate=0.0, iterations=iteration, converged=True)
        if iteration > 1 and abs(best - previous) <= tol * best:
            return SpectralNormEstimate(estimate=best, iterations=iteration, converged=True)

        z = op.rmatvec(y)
        norm_z = np.linalg.norm(z)
        if norm_z == 0.0:
            return SpectralNormEstimate(estimate=best, iterations=iteration, converged=True)
        x = z / norm_z

    logger.warning(f"Power iteration stopped after {max_iters} iterations without converging")
    return SpectralNormEstimate(estimate=best, iterations=max_iters, converged=False)


def spectral_norm_sweep(ns: Iterable[int], seeds: Iterable[int],
                        dist: Optional[EntryDistribution] = None,
                        max_iters: int = 500, tol: float = 1e-8) -> pd.DataFrame:
    """||W|| estimates for dense 1/n profiles with uncorrelated entries, one row per (n, seed)"""
    dist = dist or EntryDistribution()
    records = []
    for n in ns:
        profile = make_dense_profile(n)
        correlation = CorrelationProfile.constant(n, 0.0)
        for seed in seeds:
            W = sample_t_correlated(profile, correlation, dist, seed)
            result = estimate_spectral_norm(W, max_iters=max_iters, tol=tol, seed=seed)
            records.append({"n": n, "seed": seed, "estimate": result.estimate,
                            "iterations": result.iterations, "converged": result.converged})
    return pd.DataFrame.from_records(records, columns=["n", "seed", "estimate", "iterations",
                                                       "converged"])
