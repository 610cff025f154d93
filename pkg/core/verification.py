"""
Verification
Statistical comparison of AMP trajectories with their Gaussian DE predictions:
pseudo-Lipschitz test functions, empirical and DE statistics, gap reports,
1-D Wasserstein distances and the Onsager-variant gap diagnostic
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats
from scipy.special import expit

from core.amp_engine import Trajectory
from core.density_evolution import DEState, MuSchedule, factor_covariance
from core.errors import (
    ArityMismatchError, EmptySampleError, InconsistentConfigError, ProvenanceMismatchError,
    UnknownFamilyError
)
from utils.logger import get_logger

logger = get_logger("core.verification")

SAMPLE_BUDGET = 2_000_000
# standard errors are reported strictly positive; a constant statistic gets the floor
SE_FLOOR = float(np.finfo(float).tiny)


class TestFunctionTag(str, Enum):
    __test__ = False

    COORDINATE_POWER = "coordinate-power"
    PRODUCT_PAIR = "product-pair"
    ABSOLUTE_VALUE = "absolute-value"
    INDICATOR_SMOOTHED = "indicator-smoothed"


@dataclass(frozen=True)
class TestFunction:
    """
    phi(eta, x^1, ..., x^depth) evaluated row-wise.
    fn receives eta (or None) and an (..., depth) array of iterates.
    """
    __test__ = False

    tag: str
    fn: Callable[[Optional[np.ndarray], np.ndarray], np.ndarray]
    depth: int
    pl_constant: float

    @property
    def arity(self) -> int:
        return self.depth + 1

    def __call__(self, eta: Optional[np.ndarray], X: np.ndarray) -> np.ndarray:
        if X.shape[-1] < self.depth:
            raise ArityMismatchError(f"{self.tag} needs {self.depth} iterates, got {X.shape[-1]}")
        return self.fn(eta, X)


def coordinate_power(t: int, power: int = 2) -> TestFunction:
    """(x^t)^power; power 0 gives the constant 1"""
    pl = {0: 0.0, 1: 1.0, 2: 1.0}.get(power, float("inf"))
    return TestFunction(tag=f"x{t}^{power}", fn=lambda eta, X: X[..., t - 1] ** power,
                        depth=t, pl_constant=pl)


def product_pair(s: int, t: int) -> TestFunction:
    return TestFunction(tag=f"x{s}*x{t}", fn=lambda eta, X: X[..., s - 1] * X[..., t - 1],
                        depth=max(s, t), pl_constant=1.0)


def absolute_value(t: int) -> TestFunction:
    return TestFunction(tag=f"|x{t}|", fn=lambda eta, X: np.abs(X[..., t - 1]),
                        depth=t, pl_constant=1.0)


def indicator_smoothed(t: int, threshold: float = 0.0, width: float = 0.1) -> TestFunction:
    """Logistic approximation of 1{x^t > threshold}"""
    return TestFunction(tag=f"1[x{t}>{threshold:g}]~{width:g}",
                        fn=lambda eta, X: expit((X[..., t - 1] - threshold) / width),
                        depth=t, pl_constant=1.0 / (4.0 * width))


TEST_FUNCTIONS: Dict[TestFunctionTag, Callable[..., TestFunction]] = {
    TestFunctionTag.COORDINATE_POWER: coordinate_power,
    TestFunctionTag.PRODUCT_PAIR: product_pair,
    TestFunctionTag.ABSOLUTE_VALUE: absolute_value,
    TestFunctionTag.INDICATOR_SMOOTHED: indicator_smoothed,
}


def make_test_function(tag: str, **params) -> TestFunction:
    try:
        builder = TEST_FUNCTIONS[TestFunctionTag(tag)]
    except ValueError:
        raise UnknownFamilyError(f"Unknown test function '{tag}'") from None
    return builder(**params)


class GapReport(BaseModel):
    """Empirical statistic vs its DE reference over a seed set"""
    experiment_id: str = ""
    n: int
    t: int
    phi_tag: str
    variant: str
    empirical: float
    reference: float
    gap: float
    se: float = Field(gt=0.0)
    seeds: List[int]
    seed_gaps: List[float] = []


def _weights(beta, n: int) -> np.ndarray:
    if beta is None:
        return np.ones(n)
    return np.broadcast_to(np.asarray(beta, dtype=float), (n,))


def empirical_statistic(traj: Trajectory, phi: TestFunction, beta=None) -> float:
    """(1/n) sum_i beta_i phi(eta_i, x_i^1, ..., x_i^t)"""
    if traj.depth < phi.depth:
        raise ArityMismatchError(
            f"{phi.tag} needs {phi.depth} iterates, trajectory has {traj.depth}")
    X = traj.stacked(max(phi.depth, 1))
    values = phi(traj.eta, X)
    return float(np.mean(_weights(beta, traj.n) * values))


def de_statistic(de: DEState, phi: TestFunction, eta=None, beta=None,
                 mu: Optional[MuSchedule] = None, mc_samples: int = 100_000,
                 seed: int = 0) -> Tuple[float, float]:
    """
    (1/n) sum_i beta_i E phi(eta_i, Z_i^1, ..., Z_i^t) and its standard error.

    Z_i ~ N(0, R_i^t) is sampled through a factorization of the full t x t matrix,
    with the same standard normal draws for every index; identical rows are
    evaluated once. With a mu schedule the coordinates are shifted by mu_s u_i.
    """
    depth = max(phi.depth, 1)
    if de.t_max < depth:
        raise ArityMismatchError(f"DE state has depth {de.t_max}, {phi.tag} needs {depth}")
    n = de.n
    weights = _weights(beta, n) / n
    eta_vec = None if eta is None else np.broadcast_to(np.asarray(eta, dtype=float), (n,))
    R = de.covariance(depth)

    shifts = np.zeros((n, depth))
    if mu is not None:
        shifts = np.outer(mu.u, mu.values[:depth])

    columns = [R.reshape(n, -1), shifts]
    if eta_vec is not None:
        columns.append(eta_vec[:, None])
    _, first, inverse = np.unique(np.hstack(columns), axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    row_weights = np.bincount(inverse, weights=weights, minlength=first.size)

    L, _ = factor_covariance(R[first])
    shifts_r = shifts[first]
    eta_r = None if eta_vec is None else eta_vec[first][:, None]

    rng = np.random.default_rng([seed, depth])
    chunk = max(1, SAMPLE_BUDGET // (first.size * depth))
    total = 0.0
    total_sq = 0.0
    for start in range(0, mc_samples, chunk):
        g = rng.standard_normal((min(chunk, mc_samples - start), depth))
        Z = np.einsum("kab,mb->kma", L, g) + shifts_r[:, None, :]
        combined = row_weights @ phi(eta_r, Z)
        total += combined.sum()
        total_sq += (combined ** 2).sum()

    mean = total / mc_samples
    variance = max(total_sq / mc_samples - mean ** 2, 0.0)
    return float(mean), max(float(np.sqrt(variance / mc_samples)), SE_FLOOR)


def _check_consistent(trajectories: Sequence[Trajectory]) -> None:
    if not trajectories:
        raise EmptySampleError("convergence_gap needs at least one trajectory")
    first = trajectories[0]
    signature = lambda tr: (tr.n, tr.variance_id, tr.correlation_id, tr.activation_tag,
                            tr.variant, tr.provenance[3:])
    for traj in trajectories[1:]:
        if signature(traj) != signature(first):
            raise InconsistentConfigError(
                f"Trajectory for seed {traj.seed} was produced by a different configuration")


def convergence_gap(trajectories: Sequence[Trajectory], de: DEState, phi: TestFunction,
                    beta=None, mu: Optional[MuSchedule] = None, mc_samples: int = 100_000,
                    seed: int = 0, experiment_id: str = "") -> GapReport:
    """
    Gap between empirical statistics over seeds and the DE reference.
    The reported gap is the lower median of the per-seed gaps, and empirical is the
    statistic of the seed attaining it, so gap = |empirical - reference|.
    """
    _check_consistent(trajectories)
    first = trajectories[0]
    reference, se = de_statistic(de, phi, eta=first.eta, beta=beta, mu=mu,
                                 mc_samples=mc_samples, seed=seed)
    empiricals = np.array([empirical_statistic(traj, phi, beta) for traj in trajectories])
    gaps = np.abs(empiricals - reference)
    order = np.argsort(gaps, kind="stable")
    pick = order[(len(order) - 1) // 2]

    report = GapReport(experiment_id=experiment_id, n=first.n, t=phi.depth, phi_tag=phi.tag,
                       variant=first.variant.value, empirical=float(empiricals[pick]),
                       reference=reference, gap=float(gaps[pick]), se=se,
                       seeds=[traj.seed for traj in trajectories],
                       seed_gaps=[float(gap) for gap in gaps])
    logger.debug(f"Gap {phi.tag} n={report.n}: {report.gap:.3e} (se {report.se:.1e})")
    return report


def gap_decreases_with_n(reports: Sequence[GapReport]) -> bool:
    """True when the median gap does not increase along increasing n"""
    ordered = sorted(reports, key=lambda report: report.n)
    return all(b.gap <= a.gap for a, b in zip(ordered, ordered[1:]))


def wasserstein1d(samples_a, samples_b) -> float:
    """Order-1 Wasserstein distance between two empirical distributions"""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySampleError("wasserstein1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(stats.wasserstein_distance(a, b))


def onsager_variant_gap(traj_z: Trajectory, traj_w: Trajectory,
                        traj_v: Optional[Trajectory] = None) -> pd.DataFrame:
    """
    ||x^t_a - x^t_b|| / sqrt(n) per step for every pair of variants.
    Reported only; the variants are not expected to agree at finite n.
    """
    runs = [traj for traj in (traj_z, traj_w, traj_v) if traj is not None]
    for traj in runs[1:]:
        if traj.provenance != runs[0].provenance:
            raise ProvenanceMismatchError(
                f"{traj.variant.value} run does not share seed, matrix and activation "
                f"with the {runs[0].variant.value} run")
        if traj.depth != runs[0].depth:
            raise ProvenanceMismatchError("Trajectories have different depths")

    records = []
    for a_idx, a in enumerate(runs):
        for b in runs[a_idx + 1:]:
            pair = f"{a.variant.value}-{b.variant.value}"
            for t in range(1, a.depth + 1):
                gap = np.linalg.norm(a.x(t) - b.x(t)) / np.sqrt(a.n)
                records.append({"t": t, "pair": pair, "gap": float(gap)})
    return pd.DataFrame.from_records(records, columns=["t", "pair", "gap"])
