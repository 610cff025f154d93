"""
Activation Functions
Activations h(x, eta, t) with their almost-everywhere derivatives, the per-index
polynomial family, the Gaussian-measure Hermite projection and the non-degeneracy check
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.polynomial import hermite_e
from scipy import integrate

from core.errors import PreconditionError, UnknownFamilyError
from utils.logger import get_logger

logger = get_logger("core.activations")

ArrayLike = Union[float, np.ndarray]


@lru_cache(maxsize=32)
def probabilists_nodes(count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes/weights for E[g(xi)], xi ~ N(0, 1); weights sum to 1"""
    nodes, weights = hermite_e.hermegauss(count)
    weights = weights / math.sqrt(2.0 * math.pi)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


class ActivationFamily(str, Enum):
    IDENTITY = "identity"
    POSITIVE_PART = "positive_part"
    TANH = "tanh"
    POLYNOMIAL = "polynomial"


class EtaMode(str, Enum):
    """How eta enters h: none, h0(x + eta) or h0(x) * eta"""
    NONE = "none"
    SHIFT = "shift"
    SCALE = "scale"


@dataclass(frozen=True, eq=False)
class PolynomialFamily:
    """
    Polynomials f_r(u, i, t) = sum_iota alpha_iota(r, i, t) * prod_s u(s)^iota_s.

    exponents has shape (n_terms, q); coefficients has shape
    (marks, n_terms, n_index, n_steps). An index or step axis of size 1 is
    shared by every index or step. The univariate case (q = 1) is evaluated by
    Horner's rule.
    """
    exponents: np.ndarray
    coefficients: np.ndarray
    bound: float = math.inf
    power_coefficients: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        exponents = np.atleast_2d(np.asarray(self.exponents, dtype=np.int64))
        coefficients = np.asarray(self.coefficients, dtype=float)
        if coefficients.ndim != 4 or coefficients.shape[1] != exponents.shape[0]:
            raise PreconditionError(
                f"Coefficients {coefficients.shape} do not match {exponents.shape[0]} terms")
        if np.any(exponents < 0):
            raise PreconditionError("Polynomial exponents must be non-negative")
        largest = float(np.max(np.abs(coefficients), initial=0.0))
        if largest > self.bound:
            raise PreconditionError(
                f"Coefficient magnitude {largest:.3e} exceeds the declared bound {self.bound:.3e}")

        object.__setattr__(self, "exponents", exponents)
        object.__setattr__(self, "coefficients", coefficients)
        if exponents.shape[1] == 1:
            degree = int(exponents.max(initial=0))
            dense = np.zeros((coefficients.shape[0], degree + 1) + coefficients.shape[2:])
            for term, power in enumerate(exponents[:, 0]):
                dense[:, power] += coefficients[:, term]
            object.__setattr__(self, "power_coefficients", dense)

    @classmethod
    def univariate(cls, alphas: Sequence[float], bound: Optional[float] = None) -> "PolynomialFamily":
        """Index- and step-independent p(u) = sum_l alphas[l] u^l"""
        alphas = np.asarray(alphas, dtype=float)
        coefficients = alphas.reshape(1, -1, 1, 1)
        exponents = np.arange(alphas.size).reshape(-1, 1)
        return cls(exponents=exponents, coefficients=coefficients,
                   bound=bound if bound is not None else math.inf)

    @classmethod
    def per_index(cls, alphas: np.ndarray, bound: Optional[float] = None) -> "PolynomialFamily":
        """alphas[l, i, t] for powers l = 0..d"""
        alphas = np.asarray(alphas, dtype=float)
        if alphas.ndim != 3:
            raise PreconditionError(f"Per-index coefficients must be (degree+1, n, steps), got {alphas.shape}")
        exponents = np.arange(alphas.shape[0]).reshape(-1, 1)
        return cls(exponents=exponents, coefficients=alphas[None],
                   bound=bound if bound is not None else math.inf)

    @classmethod
    def from_csv(cls, path: Union[str, Path], bound: Optional[float] = None) -> "PolynomialFamily":
        """Coefficient file with columns i, t, l, alpha; missing entries are 0"""
        frame = pd.read_csv(path)
        missing = {"i", "t", "l", "alpha"} - set(frame.columns)
        if missing:
            raise PreconditionError(f"Coefficient file {path} lacks columns {sorted(missing)}")
        shape = (int(frame["l"].max()) + 1, int(frame["i"].max()) + 1, int(frame["t"].max()) + 1)
        alphas = np.zeros(shape)
        alphas[frame["l"].to_numpy(int), frame["i"].to_numpy(int), frame["t"].to_numpy(int)] = \
            frame["alpha"].to_numpy(float)
        return cls.per_index(alphas, bound=bound)

    @property
    def q(self) -> int:
        return self.exponents.shape[1]

    @property
    def marks(self) -> int:
        return self.coefficients.shape[0]

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max(initial=0))

    @property
    def n_index(self) -> int:
        return self.coefficients.shape[2]

    @property
    def n_steps(self) -> int:
        return self.coefficients.shape[3]

    @property
    def index_dependent(self) -> bool:
        return self.n_index > 1

    def _slots(self, index, step: int):
        if self.n_steps > 1 and not 0 <= step < self.n_steps:
            raise PreconditionError(f"Polynomial defined for steps < {self.n_steps}, asked for {step}")
        step = step if self.n_steps > 1 else 0
        if index is None or self.n_index == 1:
            return 0, step
        return np.asarray(index, dtype=np.int64), step

    def alpha(self, term: int, index=None, step: int = 0, mark: int = 0):
        slot, step = self._slots(index, step)
        return self.coefficients[mark, term, slot, step]

    def evaluate(self, u: ArrayLike, index=None, step: int = 0, mark: int = 0) -> np.ndarray:
        """p(u, i, t); u is scalar-valued (q = 1) or has a trailing axis of length q"""
        u = np.asarray(u, dtype=float)
        slot, step = self._slots(index, step)
        if self.q == 1:
            powers = self.power_coefficients[mark]
            acc = np.zeros(np.broadcast(u, powers[-1, slot, step]).shape)
            for k in range(powers.shape[0] - 1, -1, -1):
                acc = acc * u + powers[k, slot, step]
            return acc

        total = 0.0
        for term, iota in enumerate(self.exponents):
            total = total + self.coefficients[mark, term, slot, step] * np.prod(u ** iota, axis=-1)
        return np.asarray(total)

    def derivative(self, u: ArrayLike, index=None, step: int = 0, mark: int = 0) -> np.ndarray:
        """d/du p(u, i, t) for univariate families, by Horner's rule"""
        if self.q != 1:
            raise PreconditionError("Derivative is defined for univariate polynomials only")
        u = np.asarray(u, dtype=float)
        slot, step = self._slots(index, step)
        powers = self.power_coefficients[mark]
        acc = np.zeros(np.broadcast(u, powers[-1, slot, step]).shape)
        for k in range(powers.shape[0] - 1, 0, -1):
            acc = acc * u + k * powers[k, slot, step]
        return acc


def _positive_part(x):
    return np.maximum(x, 0.0)


def _positive_part_deriv(x):
    # derivative at the kink is 0
    return (x > 0).astype(float)


def _tanh_deriv(x):
    return 1.0 - np.tanh(x) ** 2


# family -> (h0, h0', Lipschitz constant of h0, kink locations of h0)
ACTIVATION_REGISTRY: Dict[ActivationFamily, Tuple[Callable, Callable, float, Tuple[float, ...]]] = {
    ActivationFamily.IDENTITY: (lambda x: x * 1.0, lambda x: np.ones_like(x), 1.0, ()),
    ActivationFamily.POSITIVE_PART: (_positive_part, _positive_part_deriv, 1.0, (0.0,)),
    ActivationFamily.TANH: (np.tanh, _tanh_deriv, 1.0, ()),
}


@dataclass(frozen=True, eq=False)
class Activation:
    """Activation h(x, eta, t) with derivative dh/dx; immutable and vectorized"""
    family: ActivationFamily
    eta_mode: EtaMode = EtaMode.NONE
    polynomial: Optional[PolynomialFamily] = None

    @property
    def tag(self) -> str:
        suffix = "" if self.eta_mode == EtaMode.NONE else f"+eta_{self.eta_mode.value}"
        return f"{self.family.value}{suffix}"

    @property
    def index_dependent(self) -> bool:
        return self.polynomial is not None and self.polynomial.index_dependent

    @property
    def lipschitz_bound(self) -> float:
        """L of h0; under eta scaling the constant is multiplied by |eta|"""
        if self.family != ActivationFamily.POLYNOMIAL:
            return ACTIVATION_REGISTRY[self.family][2]
        if self.polynomial.degree == 0:
            return 0.0
        if self.polynomial.degree == 1:
            return float(np.max(np.abs(self.polynomial.power_coefficients[:, 1]), initial=0.0))
        return math.inf

    @property
    def kinks(self) -> Tuple[float, ...]:
        if self.family == ActivationFamily.POLYNOMIAL:
            return ()
        return ACTIVATION_REGISTRY[self.family][3]

    def _argument(self, x, eta):
        x = np.asarray(x, dtype=float)
        if self.eta_mode == EtaMode.SHIFT and eta is not None:
            return x + eta
        return x

    def _scale(self, eta):
        return eta if self.eta_mode == EtaMode.SCALE and eta is not None else 1.0

    def evaluate(self, x: ArrayLike, eta: Optional[ArrayLike] = None, t: int = 0,
                 index=None) -> np.ndarray:
        """h(x, eta, t) elementwise; index selects per-index polynomial coefficients"""
        arg = self._argument(x, eta)
        if self.family == ActivationFamily.POLYNOMIAL:
            value = self.polynomial.evaluate(arg, index=index, step=t)
        else:
            value = ACTIVATION_REGISTRY[self.family][0](arg)
        return value * self._scale(eta)

    def derivative(self, x: ArrayLike, eta: Optional[ArrayLike] = None, t: int = 0,
                   index=None) -> np.ndarray:
        """dh/dx (x, eta, t) elementwise"""
        arg = self._argument(x, eta)
        if self.family == ActivationFamily.POLYNOMIAL:
            value = self.polynomial.derivative(arg, index=index, step=t)
        else:
            value = ACTIVATION_REGISTRY[self.family][1](arg)
        return value * self._scale(eta)

    __call__ = evaluate


def make_activation(family: str, eta_mode: str = "none",
                    coefficients: Optional[Sequence[float]] = None,
                    coefficient_file: Optional[Union[str, Path]] = None,
                    bound: Optional[float] = None) -> Activation:
    """
    Build an activation from its config entry.

    Args:
        family: identity, positive_part, tanh or polynomial
        eta_mode: none, shift or scale
        coefficients: alpha_0..alpha_d of a shared polynomial
        coefficient_file: CSV (i, t, l, alpha) of a per-index polynomial
        bound: declared uniform bound on |alpha|
    """
    try:
        family_enum = ActivationFamily(family)
        mode = EtaMode(eta_mode)
    except ValueError as e:
        raise UnknownFamilyError(f"Unknown activation spec: {e}") from None

    if family_enum != ActivationFamily.POLYNOMIAL:
        return Activation(family=family_enum, eta_mode=mode)

    if coefficient_file is not None:
        polynomial = PolynomialFamily.from_csv(coefficient_file, bound=bound)
    elif coefficients is not None:
        polynomial = PolynomialFamily.univariate(coefficients, bound=bound)
    else:
        raise PreconditionError("Polynomial activation needs coefficients or a coefficient file")
    return Activation(family=family_enum, eta_mode=mode, polynomial=polynomial)


def _split_points(h: Activation, eta: float, scale: float) -> List[float]:
    shift = eta if h.eta_mode == EtaMode.SHIFT else 0.0
    return sorted((kink - shift) / scale for kink in h.kinks)


def _gaussian_integral(fn: Callable[[float], float], breaks: Sequence[float]) -> float:
    """E[fn(xi)] for xi ~ N(0, 1) with adaptive quadrature split at breaks"""
    density = lambda z: fn(z) * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    edges = [-math.inf, *breaks, math.inf]
    return sum(integrate.quad(density, lo, hi, limit=200)[0] for lo, hi in zip(edges, edges[1:]))


@dataclass(frozen=True)
class HermiteProjection:
    """Least-squares polynomial approximation of h under N(0, sigma_max^2)"""
    polynomial: PolynomialFamily
    l2_error: float
    derivative_error: float
    sigma_range: Tuple[float, float]


def hermite_project(h: Activation, degree: int, sigma_range: Tuple[float, float],
                    eta: float = 0.0, quad_nodes: int = 80, t: int = 0) -> HermiteProjection:
    """
    Project h(., eta, t) on polynomials of the given degree in L2(N(0, sigma_max^2)).

    The fit is expanded in the Hermite basis He_k(x / sigma_max), which is
    orthogonal under the weight, then converted to monomials. l2_error is the
    mean squared error E(h - g)^2 at sigma_max; derivative_error is the largest
    |E h'(sigma xi) - E g'(sigma xi)| over the sigma range. Both are measured with
    adaptive quadrature split at the kinks of h.
    """
    sigma_min, sigma_max = sigma_range
    if sigma_min <= 0 or sigma_max < sigma_min:
        raise PreconditionError(f"Need 0 < sigma_min <= sigma_max, got {sigma_range}")
    if degree < 0:
        raise PreconditionError(f"Projection degree must be non-negative, got {degree}")
    if quad_nodes < degree + 1:
        raise PreconditionError(f"{quad_nodes} quadrature nodes cannot resolve degree {degree}")

    nodes, weights = probabilists_nodes(quad_nodes)
    values = h.evaluate(sigma_max * nodes, eta, t)
    hermite_coeffs = np.array([
        np.dot(weights, values * hermite_e.hermeval(nodes, np.eye(degree + 1)[k])) / math.factorial(k)
        for k in range(degree + 1)
    ])
    monomial = hermite_e.herme2poly(hermite_coeffs)
    monomial = np.pad(monomial, (0, degree + 1 - monomial.size))
    monomial = monomial / sigma_max ** np.arange(degree + 1)
    polynomial = PolynomialFamily.univariate(monomial)
    g = Activation(ActivationFamily.POLYNOMIAL, polynomial=polynomial)

    def residual(z):
        x = sigma_max * z
        return float((h.evaluate(x, eta, t) - g.evaluate(x)) ** 2)

    l2_error = _gaussian_integral(residual, _split_points(h, eta, sigma_max))

    derivative_error = 0.0
    for sigma in np.linspace(sigma_min, sigma_max, 9):
        exact = _gaussian_integral(lambda z: float(h.derivative(sigma * z, eta, t)),
                                   _split_points(h, eta, sigma))
        approx = float(np.dot(weights, g.derivative(sigma * nodes)))
        derivative_error = max(derivative_error, abs(exact - approx))

    logger.debug(f"Hermite projection of {h.tag} at degree {degree}: "
                 f"l2={l2_error:.3e} deriv={derivative_error:.3e}")
    return HermiteProjection(polynomial=polynomial, l2_error=float(l2_error),
                             derivative_error=float(derivative_error),
                             sigma_range=(float(sigma_min), float(sigma_max)))


def stein_gap(h: Activation, sigma: float, eta: float = 0.0, t: int = 0,
              quad_nodes: int = 80) -> float:
    """|E h'(sigma xi) - E[xi h(sigma xi)] / sigma| by Gauss-Hermite quadrature"""
    nodes, weights = probabilists_nodes(quad_nodes)
    x = sigma * nodes
    lhs = np.dot(weights, h.derivative(x, eta, t))
    rhs = np.dot(weights, nodes * h.evaluate(x, eta, t)) / sigma
    return float(abs(lhs - rhs))


@dataclass(frozen=True)
class NondegeneracyReport:
    initial_floor: float
    step_integrals: List[float]
    half_width: float

    @property
    def passed(self) -> bool:
        return self.initial_floor > 0 and all(value > 0 for value in self.step_integrals)


def check_nondegeneracy(h: Activation, x0: np.ndarray, eta: np.ndarray, t_max: int,
                        half_width: float = 1.0) -> NondegeneracyReport:
    """
    Numerical version of the non-degeneracy condition: inf_i h(x0_i, eta_i, 0)^2 and,
    for each step t < t_max, the smallest integral of h(x, eta_i, t)^2 over [-D, D].
    """
    x0 = np.asarray(x0, dtype=float)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), x0.shape)
    initial_floor = float(np.min(h.evaluate(x0, eta, 0, index=np.arange(x0.size)) ** 2))

    integrals = []
    for t in range(t_max):
        smallest = math.inf
        for value in np.unique(eta):
            breaks = [p for p in _split_points(h, float(value), 1.0) if -half_width < p < half_width]
            edges = [-half_width, *breaks, half_width]
            total = sum(integrate.quad(lambda x: float(h.evaluate(x, value, t) ** 2), lo, hi)[0]
                        for lo, hi in zip(edges, edges[1:]))
            smallest = min(smallest, total)
        integrals.append(float(smallest))

    report = NondegeneracyReport(initial_floor=initial_floor, step_integrals=integrals,
                                 half_width=half_width)
    if not report.passed:
        logger.warning(f"{h.tag} fails the non-degeneracy check: floor={initial_floor:.3e}, "
                       f"integrals={integrals}")
    return report
