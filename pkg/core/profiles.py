"""
Variance and Correlation Profiles
Builds and validates the variance profile S and the correlation profile T of the
matrix model, including the dense, block-wise correlated and d-regular examples
"""

import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import sparse

from core.errors import (
    AsymmetricProfileError, DimensionMismatchError, InfeasibleDegreeError,
    InvalidCorrelationError, InvalidDimensionError
)
from utils.logger import get_logger

logger = get_logger("core.profiles")

SYMMETRY_TOLERANCE = 1e-12
CHECK_TOLERANCE = 1e-12


def _freeze(matrix: sparse.csr_array) -> sparse.csr_array:
    for array in (matrix.data, matrix.indices, matrix.indptr):
        array.setflags(write=False)
    return matrix


def _matrix_id(prefix: str, matrix: sparse.csr_array, *extra) -> str:
    digest = hashlib.sha1()
    digest.update(repr((matrix.shape, extra)).encode())
    digest.update(np.ascontiguousarray(matrix.indptr, dtype=np.int64).tobytes())
    digest.update(np.ascontiguousarray(matrix.indices, dtype=np.int64).tobytes())
    digest.update(np.ascontiguousarray(matrix.data, dtype=np.float64).tobytes())
    return f"{prefix}-{digest.hexdigest()[:12]}"


@dataclass(frozen=True)
class AssumptionConstants:
    """Constants of the variance profile assumption (C_card, C_S, c_S)"""
    c_card: float
    c_s_upper: float
    c_s_lower: float


@dataclass(frozen=True, eq=False)
class VarianceProfile:
    """
    Sparse non-negative variance profile S.
    Only strictly positive entries are stored; the CSR rows are the per-row
    (column, value) lists.
    """
    matrix: sparse.csr_array
    k_n: int
    zero_diagonal: bool
    constants: AssumptionConstants
    label: str = "custom"

    @classmethod
    def from_matrix(cls, matrix, k_n: Optional[int] = None,
                    zero_diagonal: Optional[bool] = None,
                    label: str = "custom") -> "VarianceProfile":
        """
        Build a profile from a dense or sparse matrix and derive the tightest
        assumption constants the instance satisfies.

        Args:
            matrix: square array-like with non-negative entries
            k_n: sparsity budget, defaults to the largest row support
            zero_diagonal: declared flag, inferred from the stored diagonal when None
            label: family tag recorded in reports
        """
        csr = sparse.csr_array(matrix, dtype=np.float64, copy=True)
        if csr.shape[0] != csr.shape[1]:
            raise DimensionMismatchError(f"Variance profile must be square, got {csr.shape}")
        if csr.nnz and csr.data.min() < 0:
            raise ValueError("Variance profile entries must be non-negative")

        csr.eliminate_zeros()
        csr.sort_indices()
        n = csr.shape[0]

        has_diagonal = bool(np.any(csr.diagonal() > 0))
        if zero_diagonal is None:
            zero_diagonal = not has_diagonal
        elif zero_diagonal and has_diagonal:
            raise ValueError("zero_diagonal is set but the profile stores diagonal entries")

        support = np.diff(csr.indptr)
        if k_n is None:
            k_n = max(int(support.max()) if n else 0, 1)
        if k_n < 1:
            raise ValueError(f"Sparsity budget k_n must be positive, got {k_n}")

        row_sums = np.asarray(csr.sum(axis=1)).ravel()
        constants = AssumptionConstants(
            c_card=float(support.max()) / k_n if n else 0.0,
            c_s_upper=float(csr.data.max()) * k_n if csr.nnz else 0.0,
            c_s_lower=float(row_sums.min()) if n else 0.0,
        )

        return cls(matrix=_freeze(csr), k_n=int(k_n), zero_diagonal=bool(zero_diagonal),
                   constants=constants, label=label)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def rows(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        indptr, indices, data = self.matrix.indptr, self.matrix.indices, self.matrix.data
        return [(indices[indptr[i]:indptr[i + 1]], data[indptr[i]:indptr[i + 1]])
                for i in range(self.n)]

    @property
    def profile_id(self) -> str:
        return _matrix_id("S", self.matrix, self.k_n, self.zero_diagonal)

    def support_sizes(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def col_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel()

    def is_homogeneous(self, tol: float = 1e-12) -> bool:
        """True when all row sums agree within tol"""
        sums = self.row_sums()
        return bool(sums.size == 0 or np.ptp(sums) <= tol)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def to_triplet_text(self) -> str:
        """Sparse triplet text: header 'n k_n zero_diagonal' then 'row col value' lines"""
        coo = self.matrix.tocoo()
        lines = [f"{self.n} {self.k_n} {int(self.zero_diagonal)}"]
        lines.extend(f"{r} {c} {v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_triplet_text(cls, text: str, label: str = "file") -> "VarianceProfile":
        lines = [line for line in text.splitlines() if line.strip()]
        n, k_n, zero_diagonal = (int(token) for token in lines[0].split())
        if len(lines) > 1:
            body = np.array([line.split() for line in lines[1:]], dtype=float)
            rows, cols, vals = body[:, 0].astype(int), body[:, 1].astype(int), body[:, 2]
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
        matrix = sparse.coo_array((vals, (rows, cols)), shape=(n, n))
        return cls.from_matrix(matrix, k_n=k_n, zero_diagonal=bool(zero_diagonal), label=label)


@dataclass(frozen=True, eq=False)
class CorrelationProfile:
    """
    Symmetric correlation profile T.
    Stored either as constant blocks (boundaries + K x K coefficients) or as a
    sparse symmetric matrix whose unstored off-diagonal entries are 0.
    Diagonal values are never read: consumers treat tau_ii as 1.
    """
    n: int
    block_bounds: Optional[np.ndarray] = None
    block_values: Optional[np.ndarray] = None
    sparse_values: Optional[sparse.csr_array] = None
    label: str = "custom"

    @classmethod
    def constant(cls, n: int, rho: float) -> "CorrelationProfile":
        return cls.from_blocks([n], [[rho]], label="constant")

    @classmethod
    def from_blocks(cls, sizes: Sequence[int], rho_matrix,
                    label: str = "block") -> "CorrelationProfile":
        """Constant-block profile; empty blocks are dropped"""
        rho = np.atleast_2d(np.asarray(rho_matrix, dtype=float))
        sizes = np.asarray(sizes, dtype=int)
        if rho.shape != (len(sizes), len(sizes)):
            raise DimensionMismatchError(
                f"Block coefficients {rho.shape} do not match {len(sizes)} blocks")
        if np.any(sizes < 0):
            raise InvalidDimensionError(f"Block sizes must be non-negative, got {sizes.tolist()}")
        _check_correlation_range(rho)
        if not np.allclose(rho, rho.T, atol=SYMMETRY_TOLERANCE, rtol=0.0):
            raise AsymmetricProfileError("Block correlation coefficients must be symmetric")

        keep = sizes > 0
        sizes, rho = sizes[keep], rho[np.ix_(keep, keep)]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return cls(n=int(bounds[-1]), block_bounds=bounds, block_values=rho.copy(), label=label)

    @classmethod
    def from_matrix(cls, matrix, label: str = "custom") -> "CorrelationProfile":
        """Sparse symmetric profile; asymmetric input is rejected"""
        csr = sparse.csr_array(matrix, dtype=np.float64)
        n = csr.shape[0]
        if csr.shape != (n, n):
            raise DimensionMismatchError(f"Correlation profile must be square, got {csr.shape}")

        coo = csr.tocoo()
        mask = coo.row != coo.col
        off = sparse.csr_array(
            (coo.data[mask], (coo.row[mask], coo.col[mask])), shape=(n, n))
        off.sum_duplicates()
        off.eliminate_zeros()
        _check_correlation_range(off.data)
        asymmetry = abs(off - off.T)
        if asymmetry.nnz and asymmetry.max() > SYMMETRY_TOLERANCE:
            raise AsymmetricProfileError(
                f"Correlation profile is not symmetric (max |T - T^T| = {asymmetry.max():.3e})")
        off.sort_indices()
        return cls(n=n, sparse_values=_freeze(off), label=label)

    @property
    def profile_id(self) -> str:
        if self.sparse_values is not None:
            return _matrix_id("T", self.sparse_values)
        digest = hashlib.sha1()
        digest.update(np.asarray(self.block_bounds, dtype=np.int64).tobytes())
        digest.update(np.asarray(self.block_values, dtype=np.float64).tobytes())
        return f"T-{digest.hexdigest()[:12]}"

    def block_of(self, indices: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.block_bounds, indices, side="right") - 1

    def values(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """tau at the given positions, with tau_ii read as 1"""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self.sparse_values is not None:
            tau = self._sparse_lookup(rows, cols)
        else:
            tau = self.block_values[self.block_of(rows), self.block_of(cols)]
        return np.where(rows == cols, 1.0, tau)

    def _sparse_lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        coo = self.sparse_values.tocoo()
        keys = coo.row.astype(np.int64) * self.n + coo.col.astype(np.int64)
        order = np.argsort(keys)
        keys, data = keys[order], coo.data[order]
        wanted = rows * self.n + cols
        if keys.size == 0:
            return np.zeros(wanted.shape)
        pos = np.clip(np.searchsorted(keys, wanted), 0, keys.size - 1)
        return np.where(keys[pos] == wanted, data[pos], 0.0)

    def to_dense(self) -> np.ndarray:
        idx = np.arange(self.n)
        rows, cols = np.meshgrid(idx, idx, indexing="ij")
        return self.values(rows.ravel(), cols.ravel()).reshape(self.n, self.n)


def _check_correlation_range(values) -> None:
    values = np.asarray(values, dtype=float)
    if values.size and (np.max(np.abs(values)) > 1.0 or not np.all(np.isfinite(values))):
        raise InvalidCorrelationError(
            f"Correlation coefficients must lie in [-1, 1], got max |tau| = {np.max(np.abs(values))}")


def make_dense_profile(n: int, zero_diagonal: bool = False) -> VarianceProfile:
    """S = 1/n everywhere (diagonal removed under zero_diagonal)"""
    if n < 2:
        raise InvalidDimensionError(f"Dense profile needs n >= 2, got {n}")
    dense = np.full((n, n), 1.0 / n)
    if zero_diagonal:
        np.fill_diagonal(dense, 0.0)
    return VarianceProfile.from_matrix(dense, k_n=n, zero_diagonal=zero_diagonal,
                                       label="dense")


def make_multiblock_profiles(sizes: Sequence[int],
                             rho_matrix) -> Tuple[VarianceProfile, CorrelationProfile]:
    """Dense 1/n variance profile with a K x K block correlation profile"""
    sizes = [int(size) for size in sizes]
    correlation = CorrelationProfile.from_blocks(sizes, rho_matrix)
    return make_dense_profile(correlation.n), correlation


def make_block_profiles(n1: int, n2: int, rho1: float,
                        rho2: float) -> Tuple[VarianceProfile, CorrelationProfile]:
    """Two-block example: rho1 on the diagonal blocks, rho2 across blocks"""
    _check_correlation_range([rho1, rho2])
    return make_multiblock_profiles([n1, n2], [[rho1, rho2], [rho2, rho1]])


def make_dregular_profile(n: int, d: int, seed: int = 0) -> VarianceProfile:
    """
    S = A/d for the adjacency matrix A of a circulant d-regular graph whose
    labels are shuffled by a seeded permutation.
    """
    if d < 1 or d >= n or (n * d) % 2:
        raise InfeasibleDegreeError(f"No simple {d}-regular graph on {n} vertices")

    offsets = list(range(1, d // 2 + 1))
    if d % 2:
        offsets.append(n // 2)

    base = np.arange(n)
    rows, cols = [], []
    for offset in offsets:
        for shift in sorted({offset % n, (-offset) % n}):
            rows.append(base)
            cols.append((base + shift) % n)
    rows, cols = np.concatenate(rows), np.concatenate(cols)

    perm = np.random.default_rng(seed).permutation(n)
    adjacency = sparse.coo_array((np.ones(rows.size), (perm[rows], perm[cols])), shape=(n, n))
    adjacency = sparse.csr_array(adjacency)
    adjacency.sum_duplicates()

    profile = VarianceProfile.from_matrix(adjacency / d, k_n=d, zero_diagonal=True,
                                          label="dregular")
    logger.debug(f"Built {d}-regular profile on {n} vertices ({profile.profile_id})")
    return profile


class AssumptionCheck(BaseModel):
    """Outcome of one structural check on a variance profile"""
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


class ValidationReport(BaseModel):
    """Report of the variance-profile and sparsity assumptions"""
    profile_id: str
    n: int
    k_n: int
    nu: float
    checks: List[AssumptionCheck] = []
    sparsity_margin: float = 0.0

    @property
    def all_passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def get(self, name: str) -> AssumptionCheck:
        return next(check for check in self.checks if check.name == name)


def validate_assumptions(profile: VarianceProfile, nu: float = 1.0, C: Optional[float] = None,
                         constants: Optional[AssumptionConstants] = None) -> ValidationReport:
    """
    Check the variance-profile assumption and the sparsity lower bound.
    Never raises: every clause is reported with its measured value.

    Args:
        profile: variance profile to check
        nu: moment exponent, the sparsity bound uses log^(max(nu, 1))(n)
        C: sparsity constant; when None only the margin k_n / log^(nu v 1)(n) is reported
        constants: declared (C_card, C_S, c_S); defaults to those derived at construction
    """
    constants = constants or profile.constants
    n, k_n = profile.n, profile.k_n
    support = profile.support_sizes()
    row_sums = profile.row_sums()
    max_entry = float(profile.matrix.data.max()) if profile.matrix.nnz else 0.0
    min_row_sum = float(row_sums.min()) if n else 0.0

    report = ValidationReport(profile_id=profile.profile_id, n=n, k_n=k_n, nu=nu)
    report.checks.append(AssumptionCheck(
        name="row_support",
        passed=float(support.max(initial=0)) <= constants.c_card * k_n + CHECK_TOLERANCE,
        value=float(support.max(initial=0)),
        threshold=constants.c_card * k_n,
        detail="per-row support <= C_card * k_n",
    ))
    report.checks.append(AssumptionCheck(
        name="max_entry",
        passed=max_entry <= constants.c_s_upper / k_n + CHECK_TOLERANCE,
        value=max_entry,
        threshold=constants.c_s_upper / k_n,
        detail="entries <= C_S / k_n",
    ))
    report.checks.append(AssumptionCheck(
        name="row_sum",
        passed=min_row_sum > 0.0 and min_row_sum >= constants.c_s_lower - CHECK_TOLERANCE,
        value=min_row_sum,
        threshold=constants.c_s_lower,
        detail="row sums >= c_S > 0",
    ))

    log_term = math.log(n) ** max(nu, 1.0) if n > 1 else 0.0
    report.sparsity_margin = k_n / log_term if log_term > 0 else math.inf
    if C is not None:
        # the d-regular construction sets k_n = floor(C log^(nu v 1) n), so the bound is floored
        bound = math.floor(C * log_term)
        report.checks.append(AssumptionCheck(
            name="sparsity",
            passed=k_n >= bound,
            value=float(k_n),
            threshold=float(bound),
            detail="k_n >= floor(C * log^(nu v 1)(n))",
        ))

    if not report.all_passed:
        failed = [check.name for check in report.checks if not check.passed]
        logger.warning(f"Profile {report.profile_id} fails assumption checks: {failed}")
    return report
