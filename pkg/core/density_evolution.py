"""
Density Evolution
Per-index covariance recursion R_i^{t+1} = sum_j s_ij H_j^t, its collapsed form for
homogeneous profiles and the non-centered variant with the mean schedule mu_t.

Gaussian expectations are computed from 2x2 marginals only, either by a tensor
Gauss-Hermite rule or by seeded Monte Carlo with common random numbers across indices.
"""

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.activations import Activation, probabilists_nodes
from core.errors import (
    DimensionMismatchError, InvalidCovarianceError, PreconditionError
)
from core.profiles import VarianceProfile
from utils.logger import get_logger

logger = get_logger("core.density_evolution")

INVALID_EIGENVALUE = -1e-6
CLAMP_EIGENVALUE = 1e-12
WARN_EIGENVALUE = -1e-10
ROW_CHUNK = 512
MC_CHUNK = 50_000


class ExpectationMethod(str, Enum):
    GAUSS_HERMITE = "gauss-hermite"
    MONTE_CARLO = "monte-carlo"


class DEMode(str, Enum):
    PER_INDEX = "per-index"
    ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class GaussianExpectationConfig:
    """Numerical engine for E[g1(Z_a) g2(Z_b)]"""
    method: ExpectationMethod = ExpectationMethod.GAUSS_HERMITE
    nodes: int = 40
    mc_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", ExpectationMethod(self.method))
        if self.nodes < 2:
            raise PreconditionError(f"Need at least 2 quadrature nodes, got {self.nodes}")
        if self.mc_samples < 100:
            raise PreconditionError(f"Need at least 100 Monte Carlo samples, got {self.mc_samples}")


RowFunction = Callable[[np.ndarray, slice], np.ndarray]


@dataclass(frozen=True)
class _ActivationRows:
    """h (or dh) at a fixed step with per-row eta, index and mean shift"""
    h: Activation
    step: int
    eta: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    derivative: bool = False

    def __call__(self, z: np.ndarray, rows: slice) -> np.ndarray:
        if self.shift is not None:
            z = z + self.shift[rows, None]
        eta = None if self.eta is None else self.eta[rows, None]
        index = None if self.index is None else self.index[rows, None]
        fn = self.h.derivative if self.derivative else self.h.evaluate
        return fn(z, eta, self.step, index)


def factor_covariance(cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    L with L L^T = cov for a stack of symmetric matrices, via eigendecomposition.
    Eigenvalues below 1e-12 are treated as 0; below -1e-6 the input is rejected.

    Returns:
        (L, smallest eigenvalue per matrix)
    """
    lam, vectors = np.linalg.eigh(cov)
    smallest = lam[..., 0]
    if smallest.size and smallest.min() < INVALID_EIGENVALUE:
        raise InvalidCovarianceError(
            f"Covariance has eigenvalue {smallest.min():.3e} < {INVALID_EIGENVALUE:.0e}")
    root = np.sqrt(np.where(lam < CLAMP_EIGENVALUE, 0.0, lam))
    return vectors * root[..., None, :], smallest


def _tensor_grid(nodes: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xi, w = probabilists_nodes(nodes)
    return np.repeat(xi, nodes), np.tile(xi, nodes), np.repeat(w, nodes) * np.tile(w, nodes)


def _expect_single(fa: RowFunction, var: np.ndarray, cfg: GaussianExpectationConfig,
                   key: Sequence[int], fb: Optional[RowFunction] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise E[fa(Z) fb(Z)] (fb = 1 when None) for Z ~ N(0, var)"""
    if var.size and var.min() < INVALID_EIGENVALUE:
        raise InvalidCovarianceError(f"Negative variance {var.min():.3e}")
    sd = np.sqrt(np.clip(var, 0.0, None))
    mean = np.empty(var.size)
    se = np.zeros(var.size)

    if cfg.method == ExpectationMethod.GAUSS_HERMITE:
        xi, w = probabilists_nodes(cfg.nodes)
        for start in range(0, var.size, ROW_CHUNK):
            rows = slice(start, min(start + ROW_CHUNK, var.size))
            z = sd[rows, None] * xi
            values = fa(z, rows) if fb is None else fa(z, rows) * fb(z, rows)
            mean[rows] = (values * w).sum(axis=1)
        return mean, se

    for start in range(0, var.size, ROW_CHUNK):
        rows = slice(start, min(start + ROW_CHUNK, var.size))
        rng = np.random.default_rng([cfg.seed, *key])
        total = np.zeros(rows.stop - rows.start)
        total_sq = np.zeros_like(total)
        for chunk_start in range(0, cfg.mc_samples, MC_CHUNK):
            g = rng.standard_normal(min(MC_CHUNK, cfg.mc_samples - chunk_start))
            z = sd[rows, None] * g
            values = fa(z, rows) if fb is None else fa(z, rows) * fb(z, rows)
            total += values.sum(axis=1)
            total_sq += (values ** 2).sum(axis=1)
        mean[rows] = total / cfg.mc_samples
        variance = np.clip(total_sq / cfg.mc_samples - mean[rows] ** 2, 0.0, None)
        se[rows] = np.sqrt(variance / cfg.mc_samples)
    return mean, se


def _expect_pair(fa: RowFunction, fb: RowFunction, cov: np.ndarray,
                 cfg: GaussianExpectationConfig, key: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise E[fa(Z_a) fb(Z_b)] for (Z_a, Z_b) ~ N(0, cov[row])"""
    L, _ = factor_covariance(cov)
    m = cov.shape[0]
    mean = np.empty(m)
    se = np.zeros(m)

    if cfg.method == ExpectationMethod.GAUSS_HERMITE:
        a, b, w = _tensor_grid(cfg.nodes)
        for start in range(0, m, ROW_CHUNK):
            rows = slice(start, min(start + ROW_CHUNK, m))
            Lr = L[rows]
            za = Lr[:, 0, 0, None] * a + Lr[:, 0, 1, None] * b
            zb = Lr[:, 1, 0, None] * a + Lr[:, 1, 1, None] * b
            mean[rows] = (fa(za, rows) * fb(zb, rows) * w).sum(axis=1)
        return mean, se

    for start in range(0, m, ROW_CHUNK):
        rows = slice(start, min(start + ROW_CHUNK, m))
        Lr = L[rows]
        rng = np.random.default_rng([cfg.seed, *key])
        total = np.zeros(rows.stop - rows.start)
        total_sq = np.zeros_like(total)
        for chunk_start in range(0, cfg.mc_samples, MC_CHUNK):
            g = rng.standard_normal((min(MC_CHUNK, cfg.mc_samples - chunk_start), 2))
            za = Lr[:, 0, 0, None] * g[:, 0] + Lr[:, 0, 1, None] * g[:, 1]
            zb = Lr[:, 1, 0, None] * g[:, 0] + Lr[:, 1, 1, None] * g[:, 1]
            values = fa(za, rows) * fb(zb, rows)
            total += values.sum(axis=1)
            total_sq += (values ** 2).sum(axis=1)
        mean[rows] = total / cfg.mc_samples
        variance = np.clip(total_sq / cfg.mc_samples - mean[rows] ** 2, 0.0, None)
        se[rows] = np.sqrt(variance / cfg.mc_samples)
    return mean, se


def pair_expectation_with_error(cov, g1: Callable, g2: Callable,
                                cfg: Optional[GaussianExpectationConfig] = None) -> Tuple[float, float]:
    """E[g1(Z_a) g2(Z_b)] and its Monte Carlo standard error (0 for quadrature)"""
    cfg = cfg or GaussianExpectationConfig()
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=0.0, atol=1e-14):
        raise InvalidCovarianceError(f"Expected a symmetric 2x2 covariance, got {cov.tolist()}")
    mean, se = _expect_pair(lambda z, rows: g1(z), lambda z, rows: g2(z), cov[None], cfg, (0, 0))
    return float(mean[0]), float(se[0])


def gaussian_pair_expectation(cov, g1: Callable, g2: Callable,
                              cfg: Optional[GaussianExpectationConfig] = None) -> float:
    """
    E[g1(Z_a) g2(Z_b)] for (Z_a, Z_b) ~ N(0, cov)

    Args:
        cov: symmetric 2x2 covariance, eigenvalues >= -1e-6
        g1, g2: vectorized scalar functions
        cfg: quadrature or Monte Carlo engine
    """
    return pair_expectation_with_error(cov, g1, g2, cfg)[0]


@dataclass(frozen=True, eq=False)
class MuSchedule:
    """Mean schedule mu_1..mu_t of the non-centered model A = strength * u v^T + W"""
    values: np.ndarray
    strength: float
    u: np.ndarray
    v: np.ndarray

    def mu(self, t: int) -> float:
        return float(self.values[t - 1])

    def shift(self, t: int) -> np.ndarray:
        return self.mu(t) * self.u

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": np.arange(1, self.values.size + 1), "mu": self.values})


def _digest(*arrays) -> str:
    digest = hashlib.sha1()
    for array in arrays:
        if array is None:
            digest.update(b"none")
        else:
            digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return digest.hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class DEState:
    """
    Density evolution output.
    R[t - 1] holds R^t with shape (rows, t, t) and H[t] holds H^t with shape
    (rows, t + 1, t + 1); rows is n in per-index mode and 1 in asymptotic mode.
    """
    R: Tuple[np.ndarray, ...]
    H: Tuple[np.ndarray, ...]
    mode: DEMode
    n: int
    profile_id: str
    activation_tag: str
    inputs_id: str
    config: GaussianExpectationConfig
    min_eigenvalues: Tuple[float, ...]
    mu: Optional[MuSchedule] = None

    @property
    def t_max(self) -> int:
        return len(self.R)

    def covariance(self, t: int) -> np.ndarray:
        """R_i^t for every i, shape (n, t, t)"""
        if not 1 <= t <= self.t_max:
            raise PreconditionError(f"DE computed for t <= {self.t_max}, asked for {t}")
        return np.broadcast_to(self.R[t - 1], (self.n, t, t))

    def variance(self, t: int) -> np.ndarray:
        """R_i^t(t, t), the variance of Z_i^t"""
        return self.covariance(t)[:, t - 1, t - 1]

    def variance_floor(self) -> List[float]:
        return [float(self.variance(t).min()) for t in range(1, self.t_max + 1)]

    def diag_bound(self) -> List[float]:
        """max_i max_{s <= t} R_i^t(s, s) per step; finite and n-independent under the assumptions"""
        return [float(np.diagonal(self.R[t - 1], axis1=1, axis2=2).max())
                for t in range(1, self.t_max + 1)]

    def matches(self, profile: VarianceProfile, h: Activation, x0, eta) -> bool:
        """True when this state was computed for (S, h, x0, eta)"""
        return (self.profile_id == profile.profile_id and self.activation_tag == h.tag
                and self.inputs_id == _inputs_id(h, x0, eta, profile.n))

    def to_frame(self) -> pd.DataFrame:
        """Lower triangle of R_i^{t_max}; earlier steps are its upper-left blocks"""
        R = self.covariance(self.t_max)
        t_idx, s_idx = np.tril_indices(self.t_max)
        return pd.DataFrame({
            "i": np.repeat(np.arange(self.n), t_idx.size),
            "t": np.tile(t_idx + 1, self.n),
            "s": np.tile(s_idx + 1, self.n),
            "R_value": R[:, t_idx, s_idx].reshape(-1),
        })

    def summary(self) -> pd.DataFrame:
        records = []
        for t in range(1, self.t_max + 1):
            diag = self.variance(t)
            records.append({"t": t, "min_diag": float(diag.min()), "max_diag": float(diag.max()),
                            "mean_diag": float(diag.mean())})
        return pd.DataFrame.from_records(records, columns=["t", "min_diag", "max_diag", "mean_diag"])


def _vector(value, n: int, name: str) -> Optional[np.ndarray]:
    if value is None:
        return None
    array = np.asarray(value, dtype=float)
    if array.ndim == 0:
        return np.full(n, float(array))
    if array.shape != (n,):
        raise DimensionMismatchError(f"{name} must have length {n}, got shape {array.shape}")
    return array


def _inputs_id(h: Activation, x0, eta, n: int) -> str:
    poly = None if h.polynomial is None else h.polynomial.coefficients
    return _digest(_vector(x0, n, "x0"), _vector(eta, n, "eta"), poly)


def _extend(block: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Symmetric (m, k+1, k+1) array whose upper-left block is copied from block"""
    m, k = block.shape[0], block.shape[1]
    out = np.empty((m, k + 1, k + 1))
    out[:, :k, :k] = block
    out[:, k, :] = row
    out[:, :k, k] = row[:, :k]
    return out


def _recursion(apply_profile: Callable[[np.ndarray], np.ndarray], rows: int, h: Activation,
               x0: np.ndarray, eta: Optional[np.ndarray], t_max: int,
               cfg: GaussianExpectationConfig,
               spike: Optional[Tuple[float, np.ndarray, np.ndarray]] = None):
    """
    Shared DE loop.

    Step t builds only the new row of H^t: entry 0 is h(x0) E h(Z^t), entries
    s = 1..t-1 are E h(Z^s) h(Z^t) from the 2x2 marginal of R^t, entry t is E h(Z^t)^2.
    Rows with identical inputs are evaluated once unless h depends on the index.
    """
    if t_max < 1:
        raise PreconditionError(f"t_max must be at least 1, got {t_max}")

    index = np.arange(rows) if h.index_dependent else None
    hx0 = h.evaluate(x0, eta, 0, index=index)
    if not np.all(np.isfinite(hx0)):
        raise PreconditionError("h(x0, eta, 0) is not finite")

    H = [(hx0 ** 2)[:, None, None]]
    R = [apply_profile((hx0 ** 2)[:, None])[:, :, None]]
    mus: List[float] = []
    if spike is not None:
        strength, u, v = spike
        mus.append(float(strength * np.dot(v, hx0)))

    min_eigs = [float(R[0].min())]
    for t in range(1, t_max):
        Rt = R[-1]
        shifts = {}
        if spike is not None:
            for s in range(1, t + 1):
                if mus[s - 1] != 0.0 and np.any(u != 0.0):
                    shifts[s] = mus[s - 1] * u

        reps, inverse = _dedup_rows(Rt, x0, eta, shifts, h.index_dependent)
        sub = lambda array: None if array is None else array[reps]
        eta_r, index_r, hx0_r = sub(eta), sub(index), hx0[reps]
        shift_r = {s: value[reps] for s, value in shifts.items()}
        Rr = Rt[reps]

        def rows_fn(step: int) -> _ActivationRows:
            return _ActivationRows(h, step, eta_r, index_r, shift_r.get(step))

        new_row = np.empty((reps.size, t + 1))
        fn_t = rows_fn(t)
        e_t, _ = _expect_single(fn_t, Rr[:, t - 1, t - 1], cfg, (t, 0))
        new_row[:, 0] = hx0_r * e_t
        for s in range(1, t):
            cov = Rr[:, [[s - 1, s - 1], [t - 1, t - 1]], [[s - 1, t - 1], [s - 1, t - 1]]]
            new_row[:, s], _ = _expect_pair(rows_fn(s), fn_t, cov, cfg, (s, t))
        new_row[:, t], _ = _expect_single(fn_t, Rr[:, t - 1, t - 1], cfg, (t, t), fb=fn_t)

        if spike is not None:
            mus.append(float(strength * np.dot(v, e_t[inverse])))

        row = new_row[inverse]
        H.append(_extend(H[-1], row))
        R.append(_extend(Rt, apply_profile(row)))

        smallest = float(np.linalg.eigvalsh(R[-1])[:, 0].min())
        min_eigs.append(smallest)
        if smallest < WARN_EIGENVALUE:
            logger.warning(f"DE step {t + 1}: R has eigenvalue {smallest:.3e}")
        logger.debug(f"DE step {t + 1}: {reps.size} distinct rows, "
                     f"diag range [{R[-1][:, t, t].min():.6g}, {R[-1][:, t, t].max():.6g}]")

    return tuple(R), tuple(H), tuple(min_eigs), mus


def _dedup_rows(Rt: np.ndarray, x0: np.ndarray, eta: Optional[np.ndarray],
                shifts: dict, index_dependent: bool) -> Tuple[np.ndarray, np.ndarray]:
    m = Rt.shape[0]
    if index_dependent or m == 1:
        return np.arange(m), np.arange(m)
    columns = [Rt.reshape(m, -1), x0[:, None]]
    if eta is not None:
        columns.append(eta[:, None])
    columns.extend(shift[:, None] for _, shift in sorted(shifts.items()))
    _, first, inverse = np.unique(np.hstack(columns), axis=0, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


def de_run(S: VarianceProfile, h: Activation, x0, eta=None, t_max: int = 1,
           cfg: Optional[GaussianExpectationConfig] = None) -> DEState:
    """
    Per-index density evolution up to R^{t_max}.

    Args:
        S: variance profile
        h: activation
        x0: initial point (scalar or n-vector)
        eta: activation parameters (scalar, n-vector or None)
        t_max: number of covariance steps
        cfg: expectation engine, Gauss-Hermite with 40 nodes by default
    """
    cfg = cfg or GaussianExpectationConfig()
    n = S.n
    x0_vec, eta_vec = _vector(x0, n, "x0"), _vector(eta, n, "eta")
    R, H, min_eigs, _ = _recursion(lambda row: S.matrix @ row, n, h, x0_vec, eta_vec, t_max, cfg)
    return DEState(R=R, H=H, mode=DEMode.PER_INDEX, n=n, profile_id=S.profile_id,
                   activation_tag=h.tag, inputs_id=_inputs_id(h, x0, eta, n), config=cfg,
                   min_eigenvalues=min_eigs)


def de_run_asymptotic(S: VarianceProfile, h: Activation, x0: float, t_max: int,
                      cfg: Optional[GaussianExpectationConfig] = None,
                      eta: Optional[float] = None) -> DEState:
    """Collapsed recursion R^{t+1} = (row sum) H^t shared by all indices"""
    cfg = cfg or GaussianExpectationConfig()
    if not S.is_homogeneous(1e-12):
        sums = S.row_sums()
        raise PreconditionError(
            f"Asymptotic DE needs equal row sums, got range [{sums.min():.6g}, {sums.max():.6g}]")
    if h.index_dependent:
        raise PreconditionError("Asymptotic DE needs an index-independent activation")
    if np.ndim(x0) or np.ndim(eta):
        raise PreconditionError("Asymptotic DE needs scalar x0 and eta")

    row_sum = float(S.row_sums()[0]) if S.n else 0.0
    eta_vec = None if eta is None else np.array([float(eta)])
    R, H, min_eigs, _ = _recursion(lambda row: row_sum * row, 1, h, np.array([float(x0)]),
                                   eta_vec, t_max, cfg)
    return DEState(R=R, H=H, mode=DEMode.ASYMPTOTIC, n=S.n, profile_id=S.profile_id,
                   activation_tag=h.tag, inputs_id=_inputs_id(h, x0, eta, S.n), config=cfg,
                   min_eigenvalues=min_eigs)


def de_run_noncentered(S: VarianceProfile, h: Activation, x0, eta, strength: float, u, v,
                       t_max: int,
                       cfg: Optional[GaussianExpectationConfig] = None) -> Tuple[DEState, MuSchedule]:
    """
    Density evolution of the spiked model: h at step t is evaluated at Z^t + mu_t u,
    with mu_1 = strength <v, h(x0)> and mu_{t+1} = strength sum_j v_j E h(Z_j^t + mu_t u_j).
    """
    cfg = cfg or GaussianExpectationConfig()
    n = S.n
    x0_vec, eta_vec = _vector(x0, n, "x0"), _vector(eta, n, "eta")
    u_vec, v_vec = _vector(u, n, "u"), _vector(v, n, "v")
    if u_vec is None or v_vec is None:
        raise DimensionMismatchError("Spike vectors u and v are required")

    R, H, min_eigs, mus = _recursion(lambda row: S.matrix @ row, n, h, x0_vec, eta_vec, t_max, cfg,
                                     spike=(float(strength), u_vec, v_vec))
    schedule = MuSchedule(values=np.array(mus), strength=float(strength), u=u_vec, v=v_vec)
    state = DEState(R=R, H=H, mode=DEMode.PER_INDEX, n=n, profile_id=S.profile_id,
                    activation_tag=h.tag, inputs_id=_inputs_id(h, x0, eta, n), config=cfg,
                    min_eigenvalues=min_eigs, mu=schedule)
    return state, schedule


def expected_derivative(de: DEState, h: Activation, t: int, eta=None) -> np.ndarray:
    """E dh(Z_i^t + mu_t u_i, eta_i, t) for every i, by the DE's own engine"""
    variance = de.R[t - 1][:, t - 1, t - 1]
    rows = variance.size
    eta_vec = _vector(eta, de.n, "eta")
    if eta_vec is not None and rows == 1:
        eta_vec = eta_vec[:1]
    shift = None
    if de.mu is not None and de.mu.mu(t) != 0.0 and np.any(de.mu.u != 0.0):
        shift = de.mu.shift(t)
    index = np.arange(rows) if h.index_dependent else None
    fn = _ActivationRows(h, t, eta_vec, index, shift, derivative=True)
    values, _ = _expect_single(fn, variance, de.config, (t, 1 << 20))
    return np.broadcast_to(values, (de.n,)).copy()


def goe_variance_ladder(h: Activation, x0: float, t_max: int, nodes: int = 40,
                        eta: Optional[float] = None) -> List[float]:
    """sigma_1^2 = h(x0)^2, sigma_{t+1}^2 = E h(sigma_t xi, t)^2 for unit row sums"""
    xi, w = probabilists_nodes(nodes)
    ladder = [float(h.evaluate(x0, eta, 0) ** 2)]
    for t in range(1, t_max):
        sigma = np.sqrt(ladder[-1])
        ladder.append(float(np.sum(h.evaluate(sigma * xi, eta, t) ** 2 * w)))
    return ladder
