"""
AMP Engine
AMP recursions with the three Onsager variants (DE-based AMPZ, W*W^T-based AMPW,
V-based AMP) and the non-centered recursion driven by a spiked matrix
"""

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from core.activations import Activation
from core.density_evolution import DEState, expected_derivative
from core.errors import (
    DimensionMismatchError, DivergenceError, MissingDensityEvolutionError, PreconditionError
)
from core.matrix_sampler import SampledMatrix, SpikedMatrix, compute_v
from core.profiles import CorrelationProfile, VarianceProfile
from utils.logger import get_logger

logger = get_logger("core.amp_engine")

DIVERGENCE_THRESHOLD = 1e12


class OnsagerVariant(str, Enum):
    """Source of the diagonal Onsager coefficients"""
    AMPZ = "AMPZ"   # V E dh(Z^t)
    AMPW = "AMPW"   # (W * W^T) dh(x^t)
    AMP = "AMP"     # V dh(x^t)


def _vector_digest(array: Optional[np.ndarray]) -> str:
    if array is None:
        return "none"
    return hashlib.sha1(np.ascontiguousarray(array, dtype=np.float64).tobytes()).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    AMP iterates x^1..x^t with their provenance.
    onsager[k] is the coefficient vector used to build x^{k+1}; onsager[0] is zero.
    """
    iterates: Tuple[np.ndarray, ...]
    onsager: Tuple[np.ndarray, ...]
    x0: np.ndarray
    eta: Optional[np.ndarray]
    variant: OnsagerVariant
    seed: int
    matrix_id: str
    variance_id: str
    correlation_id: str
    activation_tag: str
    beta: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        return len(self.iterates)

    @property
    def n(self) -> int:
        return self.x0.size

    def x(self, t: int) -> np.ndarray:
        """x^t for 1 <= t <= depth"""
        return self.iterates[t - 1]

    def stacked(self, depth: Optional[int] = None) -> np.ndarray:
        """(n, depth) array of x^1..x^depth"""
        depth = depth or self.depth
        return np.column_stack(self.iterates[:depth])

    @property
    def provenance(self) -> Tuple[str, ...]:
        """Everything but the Onsager variant that determines the run"""
        return (str(self.seed), self.matrix_id, self.activation_tag,
                _vector_digest(self.x0), _vector_digest(self.eta))

    def to_frame(self) -> pd.DataFrame:
        values = self.stacked()
        return pd.DataFrame({
            "i": np.repeat(np.arange(self.n), self.depth),
            "t": np.tile(np.arange(1, self.depth + 1), self.n),
            "x_value": values.reshape(-1),
        })

    def summary(self) -> pd.DataFrame:
        records = []
        for t, (x, ons) in enumerate(zip(self.iterates, self.onsager), start=1):
            records.append({"t": t, "mean": float(x.mean()), "second_moment": float(np.mean(x ** 2)),
                            "onsager_mean": float(ons.mean())})
        return pd.DataFrame.from_records(records, columns=["t", "mean", "second_moment", "onsager_mean"])


def onsager_coefficients(variant: OnsagerVariant, h: Activation, t: int,
                         V: Optional[sparse.csr_array] = None,
                         W: Optional[SampledMatrix] = None,
                         x_t: Optional[np.ndarray] = None,
                         de: Optional[DEState] = None,
                         eta=None) -> np.ndarray:
    """
    Diagonal Onsager coefficients used at step t (to build x^{t+1}).

    V keeps its diagonal V_ii = s_ii (tau_ii = 1), so on a K x K block profile
    b_i differs from the block-average closed form sum_b s_ab rho_ab <h'>_b by
    the diagonal term (1 - rho_aa) s_aa h'(x_i) for index i in block a.

    Args:
        variant: AMPZ needs (V, de), AMP needs (V, x_t), AMPW needs (W, x_t)
        h: activation
        t: current step, t >= 1
        eta: activation parameters
    """
    variant = OnsagerVariant(variant)
    if variant == OnsagerVariant.AMPZ:
        if V is None or de is None:
            raise MissingDensityEvolutionError("AMPZ coefficients need V and a DE state")
        return V @ expected_derivative(de, h, t, eta)

    if x_t is None:
        raise PreconditionError(f"{variant.value} coefficients need the current iterate x^t")
    index = np.arange(x_t.size) if h.index_dependent else None
    derivative = h.derivative(x_t, eta, t, index)
    if variant == OnsagerVariant.AMP:
        if V is None:
            raise PreconditionError("AMP coefficients need V")
        return V @ derivative
    if W is None:
        raise PreconditionError("AMPW coefficients need the sampled matrix W")
    return W.hadamard_transpose @ derivative


def _iterate(matvec: Callable[[np.ndarray], np.ndarray], n: int, h: Activation, x0: np.ndarray,
             eta: Optional[np.ndarray], t_max: int,
             coefficients: Callable[[int, np.ndarray], np.ndarray]):
    """x^1 = M h(x^0); x^{t+1} = M h(x^t) - ons_t * h(x^{t-1}); h(x^{-1}) = 0"""
    index = np.arange(n) if h.index_dependent else None
    h_prev = h.evaluate(x0, eta, 0, index)
    iterates = [_checked(matvec(h_prev), 1)]
    onsager = [np.zeros(n)]

    for t in range(1, t_max):
        x_t = iterates[-1]
        h_t = h.evaluate(x_t, eta, t, index)
        ons = coefficients(t, x_t)
        iterates.append(_checked(matvec(h_t) - ons * h_prev, t + 1))
        onsager.append(ons)
        h_prev = h_t
        logger.debug(f"AMP step {t + 1}: second moment {np.mean(iterates[-1] ** 2):.6g}")

    return tuple(iterates), tuple(onsager)


def _checked(x: np.ndarray, step: int) -> np.ndarray:
    largest = float(np.max(np.abs(x), initial=0.0))
    if not np.isfinite(largest) or largest > DIVERGENCE_THRESHOLD:
        raise DivergenceError(step, largest, DIVERGENCE_THRESHOLD)
    return x


def _prepare(n: int, x0, eta) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy()
    if eta is not None:
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (n,)).copy()
    return x0, eta


def amp_run(M: SampledMatrix, S: Optional[VarianceProfile], T: Optional[CorrelationProfile],
            h: Activation,
            x0, eta=None, variant: OnsagerVariant = OnsagerVariant.AMPZ, t_max: int = 1,
            de: Optional[DEState] = None, V: Optional[sparse.csr_array] = None) -> Trajectory:
    """
    Run AMP for t_max iterates with the selected Onsager variant.

    Args:
        M: sampled matrix W
        S, T: profiles W was sampled from (V is derived from them unless given);
            AMPW runs may pass None
        h: activation
        x0, eta: initial point and activation parameters (scalar or n-vector)
        variant: AMPZ, AMPW or AMP
        t_max: number of iterates
        de: DE state for (S, h, x0, eta); required by AMPZ
        V: precomputed V = sqrt(S * S^T) * T

    Returns:
        Trajectory with iterates, Onsager vectors and provenance
    """
    variant = OnsagerVariant(variant)
    n = M.n
    if variant != OnsagerVariant.AMPW and (S is None or T is None):
        raise PreconditionError(f"{variant.value} needs the variance and correlation profiles")
    for profile in (S, T):
        if profile is not None and profile.n != n:
            raise DimensionMismatchError(f"Matrix has n={n}, profile has n={profile.n}")

    x0, eta = _prepare(n, x0, eta)

    if variant == OnsagerVariant.AMPZ and t_max > 1:
        if de is None:
            raise MissingDensityEvolutionError("AMPZ needs a DE state")
        if not de.matches(S, h, x0, eta) or de.t_max < t_max - 1:
            raise MissingDensityEvolutionError(
                f"DE state (t_max={de.t_max}) does not match this run (t_max={t_max})")

    if variant != OnsagerVariant.AMPW and V is None:
        V = compute_v(S, T)

    def coefficients(t: int, x_t: np.ndarray) -> np.ndarray:
        return onsager_coefficients(variant, h, t, V=V, W=M, x_t=x_t, de=de, eta=eta)

    iterates, onsager = _iterate(M.matvec, n, h, x0, eta, t_max, coefficients)
    return Trajectory(iterates=iterates, onsager=onsager, x0=x0, eta=eta, variant=variant,
                      seed=M.seed, matrix_id=M.matrix_id,
                      variance_id=S.profile_id if S is not None else M.variance_id,
                      correlation_id=T.profile_id if T is not None else M.correlation_id,
                      activation_tag=h.tag)


def amp_run_noncentered(A: SpikedMatrix, S: VarianceProfile, T: CorrelationProfile,
                        h: Activation, x0, eta, t_max: int, de: DEState,
                        V: Optional[sparse.csr_array] = None) -> Trajectory:
    """x^{t+1} = A h(x^t) - diag(V E dh(Z^t + mu_t u)) h(x^{t-1})"""
    n = A.n
    x0, eta = _prepare(n, x0, eta)
    if de is None or de.mu is None:
        raise MissingDensityEvolutionError("Non-centered AMP needs a DE state with a mu schedule")
    if de.mu.values.size < t_max - 1 or de.t_max < t_max - 1:
        raise PreconditionError(
            f"mu schedule covers {de.mu.values.size} steps, run needs {t_max - 1}")
    if (de.mu.strength != A.strength or not np.array_equal(de.mu.u, A.u)
            or not np.array_equal(de.mu.v, A.v)):
        raise PreconditionError("mu schedule was computed for a different spike")
    if not de.matches(S, h, x0, eta):
        raise MissingDensityEvolutionError("DE state does not match this run")

    V = compute_v(S, T) if V is None else V

    def coefficients(t: int, x_t: np.ndarray) -> np.ndarray:
        return onsager_coefficients(OnsagerVariant.AMPZ, h, t, V=V, de=de, eta=eta)

    iterates, onsager = _iterate(A.matvec, n, h, x0, eta, t_max, coefficients)
    return Trajectory(iterates=iterates, onsager=onsager, x0=x0, eta=eta,
                      variant=OnsagerVariant.AMPZ, seed=A.base.seed, matrix_id=A.matrix_id,
                      variance_id=S.profile_id, correlation_id=T.profile_id,
                      activation_tag=h.tag)
