"""
Core Unit Tests for the AMP Laboratory
- One TestCase per core module plus state, pipeline and CLI tests
- Monte Carlo tests use fixed seeds
- Large-n acceptance runs (n = 4000) only run with AMPLAB_SLOW_TESTS=1
"""
import asyncio
import itertools
import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch
from unittest.result import TestResult

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from core.activations import (
    Activation, ActivationFamily, PolynomialFamily, check_nondegeneracy, hermite_project,
    make_activation, stein_gap
)
from core.amp_engine import OnsagerVariant, amp_run, amp_run_noncentered, onsager_coefficients
from core.density_evolution import (
    GaussianExpectationConfig, de_run, de_run_asymptotic, de_run_noncentered,
    factor_covariance, gaussian_pair_expectation, goe_variance_ladder, pair_expectation_with_error
)
from core.errors import (
    AsymmetricProfileError, ArityMismatchError, BudgetExceededError, DimensionMismatchError,
    DivergenceError, EmptySampleError, InconsistentConfigError, InfeasibleDegreeError,
    InvalidCorrelationError, InvalidCovarianceError, MissingDensityEvolutionError,
    PreconditionError, ProvenanceMismatchError, UnknownFamilyError, ZeroDiagonalRequiredError
)
from core.lotka_volterra import lv_equilibrium, lv_residual, scale_interactions
from core.matrix_sampler import (
    EntryDistribution, EntryFamily, SampledMatrix, add_rank_one, compute_v,
    estimate_spectral_norm, sample_t_correlated, spectral_norm_sweep
)
from core.profiles import (
    CorrelationProfile, VarianceProfile, make_block_profiles, make_dense_profile,
    make_dregular_profile, make_multiblock_profiles, validate_assumptions
)
from core.tree_oracle import (
    LabeledTree, count_nb_trees, dump_trees, enumerate_nb_trees, load_trees, moment_comparison,
    run_polynomial_ampw, verify_tree_identity, z_recursion
)
from core.verification import (
    GapReport, absolute_value, convergence_gap, coordinate_power, de_statistic,
    empirical_statistic, gap_decreases_with_n, make_test_function, onsager_variant_gap,
    wasserstein1d
)
from graph import ExperimentGraph
from main import ConfigError, load_config, main, parse_seeds
from stages import (
    CellContext, DensityEvolutionStage, SamplingStage, TreeOracleStage, VerificationStage
)
from state import ExperimentConfig, ExperimentState, StageStatus
from utils.artifacts import config_hash

load_dotenv()

SLOW = os.getenv("AMPLAB_SLOW_TESTS") == "1"


class TestResultSummary(TestResult):
    """Custom TestResult class to track pass/fail counts"""
    __test__ = False

    def __init__(self):
        super().__init__()
        self.test_count = 0
        self.success_count = 0
        self.failure_count = 0
        self.error_count = 0
        self.skip_count = 0

    def startTest(self, test):
        super().startTest(test)
        self.test_count += 1

    def addSuccess(self, test):
        super().addSuccess(test)
        self.success_count += 1

    def addError(self, test, err):
        super().addError(test, err)
        self.error_count += 1

    def addFailure(self, test, err):
        super().addFailure(test, err)
        self.failure_count += 1

    def addSkip(self, test, reason):
        super().addSkip(test, reason)
        self.skip_count += 1

    def get_counts(self):
        return {
            'total': self.test_count,
            'passed': self.success_count,
            'failed': self.failure_count,
            'errors': self.error_count,
            'skipped': self.skip_count
        }


def dense_setup(n, rho=0.0, zero_diagonal=False):
    return make_dense_profile(n, zero_diagonal=zero_diagonal), CorrelationProfile.constant(n, rho)


def run_ampz(S, T, h, seed, t_max, x0=1.0, de=None):
    W = sample_t_correlated(S, T, seed=seed)
    de = de or de_run(S, h, x0, t_max=t_max)
    return amp_run(W, S, T, h, x0, variant=OnsagerVariant.AMPZ, t_max=t_max, de=de), de


class TestProfiles(unittest.TestCase):

    def test_1_dense_profile_passes_assumptions(self):
        """Test 1: Dense 1/n profile has unit row sums and passes every check"""
        S = make_dense_profile(100)
        np.testing.assert_allclose(S.row_sums(), 1.0, atol=1e-12)
        self.assertEqual(S.k_n, 100)
        report = validate_assumptions(S, nu=1.0, C=1.0)
        self.assertTrue(report.all_passed)
        self.assertAlmostEqual(report.sparsity_margin, 100 / np.log(100))
        print("Test 1: Dense profile assumptions passed")

    def test_2_dregular_profile_structure(self):
        """Test 2: d-regular profile is symmetric, zero-diagonal with entries 1/d"""
        S = make_dregular_profile(20, 4, seed=3)
        dense = S.to_dense()
        np.testing.assert_array_equal(S.support_sizes(), 4)
        np.testing.assert_allclose(dense, dense.T)
        self.assertTrue(np.all(np.diag(dense) == 0))
        np.testing.assert_allclose(dense[dense > 0], 0.25)
        with self.assertRaises(InfeasibleDegreeError):
            make_dregular_profile(5, 3)
        print("Test 2: d-regular profile passed")

    def test_3_block_correlation_profiles(self):
        """Test 3: Block profiles read tau by block and treat tau_ii as 1"""
        S, T = make_block_profiles(2, 3, 0.5, -0.2)
        self.assertEqual(S.n, 5)
        tau = T.to_dense()
        self.assertEqual(tau[0, 1], 0.5)
        self.assertEqual(tau[0, 3], -0.2)
        self.assertEqual(tau[3, 4], 0.5)
        np.testing.assert_array_equal(np.diag(tau), 1.0)

        S_empty, T_empty = make_block_profiles(0, 4, 0.3, 0.1)
        self.assertEqual(T_empty.n, 4)
        self.assertEqual(S_empty.n, 4)
        print("Test 3: Block correlation profiles passed")

    def test_4_invalid_correlations_rejected(self):
        """Test 4: Out-of-range or asymmetric correlation input raises"""
        with self.assertRaises(InvalidCorrelationError):
            CorrelationProfile.constant(4, 1.5)
        with self.assertRaises(AsymmetricProfileError):
            CorrelationProfile.from_matrix(np.array([[0.0, 0.3], [0.1, 0.0]]))
        with self.assertRaises(AsymmetricProfileError):
            make_multiblock_profiles([2, 2], [[0.1, 0.2], [0.3, 0.1]])
        print("Test 4: Invalid correlations rejected")

    def test_5_triplet_text_preserves_profile(self):
        """Test 5: Profile written as triplets reads back with the same id"""
        S = make_dregular_profile(12, 3, seed=1)
        restored = VarianceProfile.from_triplet_text(S.to_triplet_text())
        self.assertEqual(restored.profile_id, S.profile_id)
        self.assertTrue(restored.zero_diagonal)
        print("Test 5: Triplet text passed")

    def test_6_validation_reports_without_raising(self):
        """Test 6: A profile with an empty row fails the row-sum check in the report"""
        S = VarianceProfile.from_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
        report = validate_assumptions(S)
        self.assertFalse(report.get("row_sum").passed)
        self.assertFalse(report.all_passed)
        print("Test 6: Validation report passed")


class TestMatrixSampler(unittest.TestCase):

    def test_1_sampling_is_deterministic(self):
        """Test 1: Same (S, T, seed) gives the same matrix; another seed does not"""
        S, T = dense_setup(50, rho=0.3)
        a = sample_t_correlated(S, T, seed=7)
        b = sample_t_correlated(S, T, seed=7)
        c = sample_t_correlated(S, T, seed=8)
        np.testing.assert_array_equal(a.matrix.data, b.matrix.data)
        self.assertEqual(a.matrix_id, b.matrix_id)
        self.assertNotEqual(a.matrix_id, c.matrix_id)
        print("Test 1: Deterministic sampling passed")

    def test_2_pair_correlations_match_tau(self):
        """Test 2: Empirical pair correlation within 0.004 of tau over ~10^6 pairs"""
        n = 1415
        S = make_dense_profile(n)
        upper = np.triu_indices(n, k=1)
        for family in (EntryFamily.GAUSSIAN, EntryFamily.RADEMACHER, EntryFamily.UNIFORM):
            for tau in (-0.9, 0.0, 0.7):
                W = sample_t_correlated(S, CorrelationProfile.constant(n, tau),
                                        EntryDistribution(family), seed=11)
                X = W.recover_x(S).toarray()
                first, second = X[upper], X.T[upper]
                self.assertAlmostEqual(float(np.mean(first * second)), tau, delta=0.004,
                                       msg=f"{family.value} tau={tau}")
                self.assertAlmostEqual(float(np.mean(first ** 2)), 1.0, delta=0.01)
        print("Test 2: Pair correlations passed")

    def test_3_v_matrix_for_constant_profile(self):
        """Test 3: V_ij = rho / n off the diagonal and 1/n on it"""
        S, T = dense_setup(6, rho=-0.4)
        V = compute_v(S, T).toarray()
        expected = np.full((6, 6), -0.4 / 6)
        np.fill_diagonal(expected, 1.0 / 6)
        np.testing.assert_allclose(V, expected, atol=1e-15)
        print("Test 3: V matrix passed")

    def test_4_spectral_norm_bounded(self):
        """Test 4: ||W|| stays below 2.5 for dense Gaussian profiles"""
        ns = [500, 1000, 2000, 4000] if SLOW else [500, 1000]
        seeds = range(5) if SLOW else range(2)
        frame = spectral_norm_sweep(ns, seeds, max_iters=300, tol=1e-6)
        self.assertEqual(len(frame), len(ns) * len(seeds))
        self.assertTrue((frame["estimate"] <= 2.5).all())
        self.assertTrue((frame["estimate"] >= 1.5).all())
        print("Test 4: Spectral norm passed")

    def test_5_dimension_mismatch(self):
        """Test 5: S and T of different sizes cannot be combined"""
        with self.assertRaises(DimensionMismatchError):
            sample_t_correlated(make_dense_profile(5), CorrelationProfile.constant(6, 0.0))
        with self.assertRaises(UnknownFamilyError):
            EntryDistribution.from_name("cauchy")
        print("Test 5: Dimension mismatch passed")

    def test_6_rank_one_spike_matches_dense(self):
        """Test 6: Spiked matvec equals the dense product and the norm estimate is reported"""
        S, T = dense_setup(30)
        W = sample_t_correlated(S, T, seed=2)
        u = np.full(30, 1 / np.sqrt(30))
        A = add_rank_one(W, 1.5, u, u)
        x = np.random.default_rng(0).standard_normal(30)
        np.testing.assert_allclose(A.matvec(x), A.to_dense() @ x, atol=1e-12)
        np.testing.assert_allclose(A.rmatvec(x), A.to_dense().T @ x, atol=1e-12)
        estimate = estimate_spectral_norm(A)
        exact = np.linalg.norm(A.to_dense(), 2)
        self.assertLessEqual(estimate.estimate, exact + 1e-9)
        self.assertGreater(estimate.estimate, 0.95 * exact)
        print("Test 6: Rank-one spike passed")

    def test_7_moment_constants_grow_as_declared(self):
        """Test 7: C_mom(k) <= sqrt(3) k^(nu/2) for every family; closed forms match draws"""
        gaussian = EntryDistribution(EntryFamily.GAUSSIAN)
        self.assertAlmostEqual(gaussian.moment(2), 1.0, delta=1e-12)
        self.assertAlmostEqual(gaussian.moment(4), 3.0, delta=1e-12)
        self.assertAlmostEqual(gaussian.moment(6), 15.0, delta=1e-10)
        self.assertEqual(gaussian.nu, 1.0)

        rng = np.random.default_rng(4)
        for family in EntryFamily:
            dist = EntryDistribution(family)
            self.assertAlmostEqual(dist.moment(2), 1.0, delta=1e-12, msg=family.value)
            draws = dist.draw(rng, 400_000)
            self.assertAlmostEqual(float(np.mean(draws ** 4)), dist.moment(4),
                                   delta=0.05 * dist.moment(4), msg=family.value)
            checks = dist.moment_checks(orders=(2, 4, 8, 16, 32, 64))
            self.assertTrue(all(check.passed for check in checks), msg=family.value)
            for k in (2, 8, 32):
                self.assertLessEqual(dist.moment_constant(k), np.sqrt(3.0) * k ** (dist.nu / 2))
        self.assertLessEqual(EntryDistribution(EntryFamily.UNIFORM).moment_constant(64), np.sqrt(3.0))
        print("Test 7: Moment constants passed")

    def test_8_matrix_dump_round_trip(self):
        """Test 8: The triplet dump of W reads back to the same matrix"""
        S, T = dense_setup(12, rho=0.4, zero_diagonal=True)
        W = sample_t_correlated(S, T, EntryDistribution(EntryFamily.UNIFORM), seed=3)
        text = W.to_triplet_text()
        self.assertEqual(text.splitlines()[0], "12 11 1")
        restored = SampledMatrix.from_triplet_text(text, seed=3)
        np.testing.assert_array_equal(restored.to_dense(), W.to_dense())
        self.assertEqual(restored.matrix_id, W.matrix_id)
        print("Test 8: Matrix dump passed")


class TestActivations(unittest.TestCase):

    def test_1_builtin_derivatives(self):
        """Test 1: Positive part derivative is 0 at the kink; tanh derivative is 1 - tanh^2"""
        relu = make_activation("positive_part")
        np.testing.assert_array_equal(relu.derivative(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])
        tanh = make_activation("tanh")
        x = np.linspace(-2, 2, 5)
        np.testing.assert_allclose(tanh.derivative(x), 1 - np.tanh(x) ** 2)
        print("Test 1: Builtin derivatives passed")

    def test_2_polynomial_evaluation(self):
        """Test 2: Horner evaluation and derivative of a univariate polynomial"""
        p = PolynomialFamily.univariate([1.0, -2.0, 0.5, 0.25])
        x = np.linspace(-1.5, 1.5, 7)
        np.testing.assert_allclose(p.evaluate(x), 1 - 2 * x + 0.5 * x ** 2 + 0.25 * x ** 3)
        np.testing.assert_allclose(p.derivative(x), -2 + x + 0.75 * x ** 2)
        self.assertEqual(p.degree, 3)
        with self.assertRaises(PreconditionError):
            PolynomialFamily.univariate([1.0, 5.0], bound=2.0)
        print("Test 2: Polynomial evaluation passed")

    def test_3_unknown_family(self):
        """Test 3: Unknown activation and missing coefficients raise"""
        with self.assertRaises(UnknownFamilyError):
            make_activation("sigmoid")
        with self.assertRaises(PreconditionError):
            make_activation("polynomial")
        print("Test 3: Unknown family passed")

    def test_4_hermite_projection_of_identity(self):
        """Test 4: Degree-1 projection of the identity is exact"""
        projection = hermite_project(make_activation("identity"), 1, (0.5, 1.0))
        np.testing.assert_allclose(projection.polynomial.power_coefficients[0, :, 0, 0],
                                   [0.0, 1.0], atol=1e-12)
        self.assertLess(projection.l2_error, 1e-12)
        self.assertLess(projection.derivative_error, 1e-8)

        tanh = hermite_project(make_activation("tanh"), 5, (0.5, 1.0))
        self.assertLess(tanh.l2_error, 1e-3)
        print("Test 4: Hermite projection passed")

    def test_5_stein_identity(self):
        """Test 5: E h'(sigma xi) = E[xi h(sigma xi)] / sigma for tanh"""
        self.assertLess(stein_gap(make_activation("tanh"), 0.7), 1e-8)
        print("Test 5: Stein identity passed")

    def test_6_nondegeneracy(self):
        """Test 6: Identity from x0 = 1 is non-degenerate; from x0 = 0 it is not"""
        h = make_activation("identity")
        self.assertTrue(check_nondegeneracy(h, np.ones(5), 0.0, t_max=2).passed)
        report = check_nondegeneracy(h, np.zeros(5), 0.0, t_max=2)
        self.assertFalse(report.passed)
        self.assertEqual(report.initial_floor, 0.0)
        print("Test 6: Non-degeneracy passed")

    def test_7_lipschitz_property(self):
        """Test 7: |h(x) - h(y)| <= L |x - y| over 10^4 random (x, y, eta, t)"""
        rng = np.random.default_rng(12)
        x, y = rng.normal(0, 3, (2, 10_000))
        eta = rng.uniform(-2, 2, 10_000)
        t = rng.integers(0, 5, 10_000)
        for family in ("identity", "positive_part", "tanh"):
            for mode in ("none", "shift"):
                h = make_activation(family, mode)
                self.assertEqual(h.lipschitz_bound, 1.0)
                gap = np.abs(h.evaluate(x, eta, t) - h.evaluate(y, eta, t))
                self.assertTrue(np.all(gap <= h.lipschitz_bound * np.abs(x - y) + 1e-12),
                                msg=h.tag)

        linear = make_activation("polynomial", coefficients=[0.5, -2.0])
        self.assertEqual(linear.lipschitz_bound, 2.0)
        gap = np.abs(linear.evaluate(x) - linear.evaluate(y))
        self.assertTrue(np.all(gap <= 2.0 * np.abs(x - y) + 1e-12))
        self.assertEqual(make_activation("polynomial", coefficients=[0.7]).lipschitz_bound, 0.0)
        self.assertEqual(make_activation("polynomial", coefficients=[0.0, 1.0, 0.5]).lipschitz_bound,
                         np.inf)
        print("Test 7: Lipschitz property passed")

    def test_8_derivative_matches_finite_differences(self):
        """Test 8: deriv agrees with central differences to 1e-6 away from kinks"""
        x = np.random.default_rng(13).normal(0, 2, 2_000)
        step = 1e-5
        cases = [make_activation(family) for family in ("identity", "positive_part", "tanh")]
        cases.append(make_activation("polynomial", coefficients=[0.2, -1.0, 0.5, 0.1]))
        for h in cases:
            points = x[np.all(np.abs(x[:, None] - np.array(h.kinks or (np.inf,))) > 1e-3, axis=1)]
            central = (h.evaluate(points + step) - h.evaluate(points - step)) / (2 * step)
            np.testing.assert_allclose(h.derivative(points), central, atol=1e-6, rtol=0,
                                       err_msg=h.tag)
        print("Test 8: Finite differences passed")

    def test_9_hermite_error_decreases_with_degree(self):
        """Test 9: Projection error is non-increasing in degree; positive part at degree 5 < 0.05"""
        for family in ("positive_part", "tanh"):
            h = make_activation(family)
            errors = [hermite_project(h, degree, (1.0, 1.0)).l2_error for degree in range(1, 7)]
            for lower, higher in zip(errors, errors[1:]):
                self.assertLessEqual(higher, lower + 1e-8, msg=f"{family}: {errors}")
        relu = hermite_project(make_activation("positive_part"), 5, (1.0, 1.0))
        self.assertLess(relu.l2_error, 0.05)
        print("Test 9: Hermite error vs degree passed")


class TestDensityEvolution(unittest.TestCase):

    def test_1_identity_activation_gives_identity(self):
        """Test 1: Identity h on the dense profile gives R^t = I_t for t <= 6"""
        de = de_run(make_dense_profile(50), make_activation("identity"), 1.0, t_max=6)
        for t in range(1, 7):
            np.testing.assert_allclose(de.covariance(t), np.broadcast_to(np.eye(t), (50, t, t)),
                                       atol=1e-10)
        print("Test 1: Identity DE passed")

    def test_2_nesting_is_bitwise(self):
        """Test 2: The upper-left block of R^t equals R^{t-1} bitwise"""
        rng = np.random.default_rng(4)
        profiles = [
            make_dense_profile(40),
            make_block_profiles(15, 25, 0.5, -0.3)[0],
            make_dregular_profile(60, 4),
            VarianceProfile.from_matrix(rng.random((30, 30)) / 15),
        ]
        h = make_activation("tanh")
        x0 = np.linspace(0.5, 1.5, 30)
        for S in profiles:
            start = x0 if S.n == 30 else 1.0
            de = de_run(S, h, start, t_max=6)
            for t in range(2, 7):
                self.assertTrue(np.array_equal(de.R[t - 1][:, :t - 1, :t - 1], de.R[t - 2]))
        print("Test 2: DE nesting passed")

    def test_3_half_gaussian_ladder(self):
        """Test 3: Positive part from h(x0) = 1 gives sigma_t^2 = 2^(1-t)"""
        h = make_activation("positive_part")
        de = de_run(make_dense_profile(40), h, 1.0, t_max=5)
        for t in range(1, 6):
            np.testing.assert_allclose(de.variance(t), 2.0 ** (1 - t), atol=1e-6)
        np.testing.assert_allclose(goe_variance_ladder(h, 1.0, 5), 2.0 ** -np.arange(5), atol=1e-12)
        print("Test 3: Half-Gaussian ladder passed")

    def test_4_dregular_asymptotic_collapse(self):
        """Test 4: On a d-regular profile R_i^t is the same for all i and equals the collapsed DE"""
        S = make_dregular_profile(200, 6, seed=2)
        h = make_activation("tanh")
        per_index = de_run(S, h, 1.0, t_max=4)
        collapsed = de_run_asymptotic(S, h, 1.0, t_max=4)
        for t in range(1, 5):
            R = per_index.R[t - 1]
            self.assertLessEqual(float(np.max(np.abs(R - R[0]))), 1e-12)
            self.assertLessEqual(float(np.max(np.abs(R - collapsed.R[t - 1][0]))), 1e-12)
        with self.assertRaises(PreconditionError):
            de_run_asymptotic(VarianceProfile.from_matrix(np.array([[0.0, 1.0], [0.5, 0.0]])),
                              h, 1.0, t_max=2)
        print("Test 4: d-regular collapse passed")

    def test_5_mu_schedule_for_identity(self):
        """Test 5: Identity h gives mu_{t+1} = strength <v, u> mu_t"""
        n, strength = 100, 0.8
        u = np.full(n, 1 / np.sqrt(n))
        v = np.linspace(0.5, 1.5, n) / np.sqrt(n)
        _, schedule = de_run_noncentered(make_dense_profile(n), make_activation("identity"),
                                         1.0, None, strength, u, v, t_max=5)
        self.assertAlmostEqual(schedule.mu(1), strength * v.sum(), delta=1e-10)
        for t in range(1, 5):
            expected = strength * np.dot(v, u) * schedule.mu(t)
            self.assertAlmostEqual(schedule.mu(t + 1), expected, delta=1e-10 * max(1.0, abs(expected)))
        print("Test 5: mu schedule passed")

    def test_6_pair_expectations(self):
        """Test 6: Quadrature pair expectations and rejection of invalid covariances"""
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        self.assertAlmostEqual(gaussian_pair_expectation(cov, lambda z: z, lambda z: z), 0.5,
                               delta=1e-12)
        self.assertAlmostEqual(gaussian_pair_expectation(np.eye(2), lambda z: z ** 2,
                                                         lambda z: z ** 2), 1.0, delta=1e-12)
        with self.assertRaises(InvalidCovarianceError):
            factor_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
        print("Test 6: Pair expectations passed")

    def test_7_monte_carlo_engine(self):
        """Test 7: Monte Carlo estimate within 4 SE; 4x the samples halves the SE"""
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        small = GaussianExpectationConfig(method="monte-carlo", mc_samples=20_000, seed=1)
        large = GaussianExpectationConfig(method="monte-carlo", mc_samples=80_000, seed=1)
        mean, se = pair_expectation_with_error(cov, lambda z: z, lambda z: z, small)
        self.assertLess(abs(mean - 0.5), 4 * se)
        _, se_large = pair_expectation_with_error(cov, lambda z: z, lambda z: z, large)
        self.assertAlmostEqual(se_large / se, 0.5, delta=0.1)
        print("Test 7: Monte Carlo engine passed")

    def test_8_engines_agree_on_builtins(self):
        """Test 8: Gauss-Hermite (40 nodes) and Monte Carlo (10^6) agree on random PSD inputs"""
        rng = np.random.default_rng(21)
        quadrature = GaussianExpectationConfig(method="gauss-hermite", nodes=40)
        for case in range(3):
            B = rng.standard_normal((2, 2))
            cov = B @ B.T / 2 + 0.1 * np.eye(2)
            cov = (cov + cov.T) / 2
            sampler = GaussianExpectationConfig(method="monte-carlo", mc_samples=1_000_000,
                                                seed=case)
            for family in ("identity", "positive_part", "tanh"):
                h = make_activation(family)
                exact, _ = pair_expectation_with_error(cov, h.evaluate, h.evaluate, quadrature)
                mean, se = pair_expectation_with_error(cov, h.evaluate, h.evaluate, sampler)
                self.assertLess(abs(exact - mean), 4 * se, msg=f"{family} case {case}")
        print("Test 8: Engine agreement passed")

    def test_9_diag_bound(self):
        """Test 9: diag_bound is the running maximum of the DE variances"""
        identity = de_run(make_dense_profile(40), make_activation("identity"), 1.0, t_max=4)
        np.testing.assert_allclose(identity.diag_bound(), np.ones(4), atol=1e-10)

        S = make_dregular_profile(60, 4, seed=1)
        de = de_run(S, make_activation("tanh"), np.linspace(0.5, 2.0, 60), t_max=4)
        running = np.maximum.accumulate([de.variance(t).max() for t in range(1, 5)])
        np.testing.assert_allclose(de.diag_bound(), running, rtol=1e-12)
        self.assertTrue(np.all(np.isfinite(de.diag_bound())))
        print("Test 9: Diagonal bound passed")


class TestAmpEngine(unittest.TestCase):

    def test_1_blockwise_onsager_identity(self):
        """Test 1: AMP coefficients equal the block-average formula at n = 200"""
        for sizes, rho in (([80, 120], [[0.6, -0.3], [-0.3, 0.2]]),
                           ([50, 70, 80], [[0.9, 0.1, -0.5], [0.1, -0.2, 0.3], [-0.5, 0.3, 0.4]])):
            S, T = make_multiblock_profiles(sizes, rho)
            n = S.n
            h = make_activation("tanh")
            x = np.random.default_rng(5).standard_normal(n)
            coefficients = onsager_coefficients(OnsagerVariant.AMP, h, 1, V=compute_v(S, T), x_t=x)

            dh = h.derivative(x)
            labels = np.repeat(np.arange(len(sizes)), sizes)
            rho = np.asarray(rho)
            block_sums = np.array([dh[labels == b].sum() for b in range(len(sizes))])
            expected = (rho[labels] @ block_sums + (1 - rho[labels, labels]) * dh) / n
            np.testing.assert_allclose(coefficients, expected, atol=1e-12, rtol=0)
        print("Test 1: Block-wise Onsager identity passed")

    def test_2_elliptic_shortcut(self):
        """Test 2: Constant rho on the dense profile gives rho <dh> plus a diagonal term"""
        n, rho = 150, 0.35
        S, T = dense_setup(n, rho)
        h = make_activation("tanh")
        x = np.random.default_rng(6).standard_normal(n)
        coefficients = onsager_coefficients(OnsagerVariant.AMP, h, 1, V=compute_v(S, T), x_t=x)
        dh = h.derivative(x)
        np.testing.assert_allclose(coefficients, rho * dh.mean() + (1 - rho) * dh / n, atol=1e-12)
        print("Test 2: Elliptic shortcut passed")

    def test_3_preconditions(self):
        """Test 3: AMPZ without DE, AMP without profiles and size mismatches raise"""
        S, T = dense_setup(20)
        W = sample_t_correlated(S, T, seed=0)
        h = make_activation("tanh")
        with self.assertRaises(MissingDensityEvolutionError):
            amp_run(W, S, T, h, 1.0, variant=OnsagerVariant.AMPZ, t_max=2)
        with self.assertRaises(PreconditionError):
            amp_run(W, None, None, h, 1.0, variant=OnsagerVariant.AMP, t_max=2)
        with self.assertRaises(DimensionMismatchError):
            amp_run(W, make_dense_profile(21), T, h, 1.0, variant=OnsagerVariant.AMP, t_max=2)
        print("Test 3: Preconditions passed")

    def test_4_divergence_detected(self):
        """Test 4: An iterate above 1e12 raises DivergenceError with its step"""
        M = SampledMatrix.from_matrix(np.eye(5) * 1e13)
        with self.assertRaises(DivergenceError) as ctx:
            amp_run(M, None, None, make_activation("identity"), 1.0,
                    variant=OnsagerVariant.AMPW, t_max=3)
        self.assertEqual(ctx.exception.step, 1)
        print("Test 4: Divergence passed")

    def test_5_onsager_variant_gap(self):
        """Test 5: Variants share x^1 and report a gap per pair and step"""
        S, T = dense_setup(200, rho=0.3)
        W = sample_t_correlated(S, T, seed=1)
        h = make_activation("tanh")
        de = de_run(S, h, 1.0, t_max=3)
        V = compute_v(S, T)
        runs = {variant: amp_run(W, S, T, h, 1.0, variant=variant, t_max=3, de=de, V=V)
                for variant in OnsagerVariant}
        gaps = onsager_variant_gap(runs[OnsagerVariant.AMPZ], runs[OnsagerVariant.AMPW],
                                   runs[OnsagerVariant.AMP])
        self.assertEqual(len(gaps), 9)
        self.assertEqual(set(gaps["pair"]), {"AMPZ-AMPW", "AMPZ-AMP", "AMPW-AMP"})
        self.assertTrue((gaps.loc[gaps["t"] == 1, "gap"] == 0).all())
        self.assertTrue((gaps.loc[gaps["t"] == 3, "gap"] < 0.5).all())

        other = amp_run(sample_t_correlated(S, T, seed=2), S, T, h, 1.0,
                        variant=OnsagerVariant.AMPW, t_max=3)
        with self.assertRaises(ProvenanceMismatchError):
            onsager_variant_gap(runs[OnsagerVariant.AMPZ], other)
        print("Test 5: Onsager variant gap passed")

    def test_6_ampz_tracks_density_evolution(self):
        """Test 6: Second moments of AMPZ iterates follow the DE variances at n = 1000"""
        S, T = dense_setup(1000, rho=0.5)
        traj, de = run_ampz(S, T, make_activation("tanh"), seed=3, t_max=3)
        for t in range(1, 4):
            self.assertAlmostEqual(float(np.mean(traj.x(t) ** 2)), float(de.variance(t)[0]),
                                   delta=0.1)
        print("Test 6: AMPZ vs DE passed")

    def test_7_noncentered_first_step(self):
        """Test 7: Non-centered x^1 is A h(x0)"""
        n = 50
        S, T = dense_setup(n)
        W = sample_t_correlated(S, T, seed=4)
        u = np.full(n, 1 / np.sqrt(n))
        A = add_rank_one(W, 1.2, u, u)
        h = make_activation("identity")
        de, _ = de_run_noncentered(S, h, 1.0, None, 1.2, u, u, t_max=3)
        traj = amp_run_noncentered(A, S, T, h, 1.0, None, 3, de)
        np.testing.assert_allclose(traj.x(1), A.to_dense() @ np.ones(n), atol=1e-12)
        self.assertEqual(traj.depth, 3)
        print("Test 7: Non-centered AMP passed")

    def test_8_correlation_invariance_of_de(self):
        """Test 8: DE ignores T; AMP second moments agree for rho = +0.5 and -0.5"""
        n = 4000 if SLOW else 800
        S = make_dense_profile(n)
        h = make_activation("tanh")
        de = de_run(S, h, 1.0, t_max=3)
        again = de_run(S, h, 1.0, t_max=3)
        for t in range(3):
            self.assertTrue(np.array_equal(de.R[t], again.R[t]))

        plus, _ = run_ampz(S, CorrelationProfile.constant(n, 0.5), h, seed=0, t_max=3, de=de)
        minus, _ = run_ampz(S, CorrelationProfile.constant(n, -0.5), h, seed=0, t_max=3, de=de)
        tolerance = 0.05 if SLOW else 0.12
        for t in range(1, 4):
            self.assertLess(abs(np.mean(plus.x(t) ** 2) - np.mean(minus.x(t) ** 2)), tolerance)
        print("Test 8: Correlation invariance passed")

    def test_9_variant_gap_ignores_argument_order(self):
        """Test 9: Swapping the runs only renames the pairs"""
        S, T = dense_setup(150, rho=-0.4)
        W = sample_t_correlated(S, T, seed=6)
        h = make_activation("tanh")
        de = de_run(S, h, 1.0, t_max=3)
        V = compute_v(S, T)
        runs = [amp_run(W, S, T, h, 1.0, variant=variant, t_max=3, de=de, V=V)
                for variant in (OnsagerVariant.AMPZ, OnsagerVariant.AMPW, OnsagerVariant.AMP)]

        def by_pair(frame):
            return {(frozenset(row.pair.split("-")), row.t): row.gap for row in frame.itertuples()}

        forward = by_pair(onsager_variant_gap(*runs))
        backward = by_pair(onsager_variant_gap(runs[2], runs[1], runs[0]))
        self.assertEqual(forward.keys(), backward.keys())
        for key, gap in forward.items():
            self.assertAlmostEqual(backward[key], gap, delta=1e-15)
        print("Test 9: Variant gap argument order passed")


class TestVerification(unittest.TestCase):

    def test_1_empirical_statistic(self):
        """Test 1: Empirical mean of (x^1)^2 on a deterministic run"""
        M = SampledMatrix.from_matrix(2 * np.eye(4))
        traj = amp_run(M, None, None, make_activation("identity"), np.array([1.0, 2.0, 3.0, 4.0]),
                       variant=OnsagerVariant.AMPW, t_max=1)
        self.assertAlmostEqual(empirical_statistic(traj, coordinate_power(1, 2)), 30.0)
        self.assertAlmostEqual(empirical_statistic(traj, coordinate_power(1, 2), beta=0.5), 15.0)
        with self.assertRaises(ArityMismatchError):
            empirical_statistic(traj, coordinate_power(2, 2))
        print("Test 1: Empirical statistic passed")

    def test_2_wasserstein(self):
        """Test 2: W1 of a shifted sample is the shift; empty samples raise"""
        a = np.random.default_rng(0).standard_normal(500)
        self.assertAlmostEqual(wasserstein1d(a, a + 0.3), 0.3, delta=1e-12)
        self.assertAlmostEqual(wasserstein1d([0.0, 1.0], [0.0, 0.5, 1.0]), 1 / 6, delta=1e-12)
        with self.assertRaises(EmptySampleError):
            wasserstein1d([], [1.0])
        print("Test 2: Wasserstein passed")

    def test_3_de_statistic(self):
        """Test 3: E (Z^1)^2 = 1 for the identity DE within 4 SE"""
        de = de_run(make_dense_profile(50), make_activation("identity"), 1.0, t_max=2)
        mean, se = de_statistic(de, coordinate_power(1, 2), mc_samples=100_000, seed=3)
        self.assertGreater(se, 0)
        self.assertLess(abs(mean - 1.0), 4 * se)
        mean_pair, se_pair = de_statistic(de, make_test_function("product-pair", s=1, t=2),
                                          mc_samples=100_000, seed=3)
        self.assertLess(abs(mean_pair), 4 * se_pair)
        print("Test 3: DE statistic passed")

    def test_4_gap_uses_lower_median_seed(self):
        """Test 4: convergence_gap reports the lower-median seed gap"""
        S, T = dense_setup(60)
        h = make_activation("identity")
        de = de_run(S, h, 1.0, t_max=2)
        trajectories = [run_ampz(S, T, h, seed=seed, t_max=2, de=de)[0] for seed in range(4)]
        report = convergence_gap(trajectories, de, coordinate_power(2, 2), mc_samples=20_000,
                                 experiment_id="unit")
        self.assertEqual(report.gap, sorted(report.seed_gaps)[1])
        self.assertAlmostEqual(abs(report.empirical - report.reference), report.gap, delta=1e-12)
        self.assertEqual(report.seeds, [0, 1, 2, 3])

        other_S, other_T = dense_setup(70)
        stranger = run_ampz(other_S, other_T, h, seed=0, t_max=2)[0]
        with self.assertRaises(InconsistentConfigError):
            convergence_gap([trajectories[0], stranger], de, coordinate_power(1, 2))
        print("Test 4: Lower-median gap passed")

    def test_5_gap_trend(self):
        """Test 5: gap_decreases_with_n orders reports by n"""
        def report(n, gap):
            return GapReport(n=n, t=1, phi_tag="x1^2", variant="AMPZ", empirical=gap,
                             reference=0.0, gap=gap, se=1e-3, seeds=[0])
        self.assertTrue(gap_decreases_with_n([report(4000, 0.01), report(500, 0.03)]))
        self.assertFalse(gap_decreases_with_n([report(500, 0.01), report(4000, 0.03)]))
        with self.assertRaises(UnknownFamilyError):
            make_test_function("cosine", t=1)
        print("Test 5: Gap trend passed")

    @unittest.skipUnless(SLOW, "set AMPLAB_SLOW_TESTS=1 for n = 4000 runs")
    def test_6_tanh_convergence_gap(self):
        """Test 6: tanh AMP gap below 0.05 at n = 4000 and shrinking from n = 500"""
        h = make_activation("tanh")
        for phi in (coordinate_power(3, 2), absolute_value(3)):
            reports = []
            for n in (500, 4000):
                S, T = dense_setup(n)
                de = de_run(S, h, 1.0, t_max=3)
                trajectories = [run_ampz(S, T, h, seed=seed, t_max=3, de=de)[0] for seed in range(5)]
                reports.append(convergence_gap(trajectories, de, phi, mc_samples=400_000))
            self.assertLess(reports[1].gap, 0.05)
            self.assertTrue(gap_decreases_with_n(reports))
        print("Test 6: tanh convergence gap passed")

    @unittest.skipUnless(SLOW, "set AMPLAB_SLOW_TESTS=1 for n = 4000 runs")
    def test_7_half_gaussian_amp(self):
        """Test 7: Positive-part AMP second moments within 5% of 2^(1-t)"""
        S, T = dense_setup(4000)
        h = make_activation("positive_part")
        de = de_run(S, h, 1.0, t_max=3)
        moments = np.array([[np.mean(traj.x(t) ** 2) for t in range(1, 4)]
                            for traj in (run_ampz(S, T, h, seed=seed, t_max=3, de=de)[0]
                                         for seed in range(5))])
        np.testing.assert_allclose(np.median(moments, axis=0), 2.0 ** -np.arange(3), rtol=0.05)
        print("Test 7: Half-Gaussian AMP passed")

    def test_8_spike_projection(self):
        """Test 8: <u, x^t> / ||u||^2 within 10% of mu_t (n = 1000 unless slow tests are on)"""
        n, strength = (4000 if SLOW else 1000), 1.5
        S, T = dense_setup(n)
        h = make_activation("identity")
        u = np.full(n, 1 / np.sqrt(n))
        de, schedule = de_run_noncentered(S, h, 1.0, None, strength, u, u, t_max=3)
        projections = []
        for seed in range(5):
            A = add_rank_one(sample_t_correlated(S, T, seed=seed), strength, u, u)
            traj = amp_run_noncentered(A, S, T, h, 1.0, None, 3, de)
            projections.append([np.dot(u, traj.x(t)) / np.dot(u, u) for t in range(1, 4)])
        median = np.median(np.array(projections), axis=0)
        np.testing.assert_allclose(median, schedule.values[:3], rtol=0.1)
        print("Test 8: Spike projection passed")

    def test_9_pseudo_lipschitz_constants(self):
        """Test 9: |phi(x) - phi(y)| <= L ||x - y|| (1 + ||x|| + ||y||) with the declared L"""
        rng = np.random.default_rng(31)
        X, Y = rng.normal(0, 2, (2, 10_000, 2))
        norm = lambda A: np.linalg.norm(A, axis=1)
        bound = norm(X - Y) * (1 + norm(X) + norm(Y))
        phis = [coordinate_power(2, 1), coordinate_power(2, 2), absolute_value(2),
                make_test_function("product-pair", s=1, t=2),
                make_test_function("indicator-smoothed", t=2, threshold=0.5, width=0.2)]
        for phi in phis:
            self.assertTrue(np.isfinite(phi.pl_constant), msg=phi.tag)
            gap = np.abs(phi(None, X) - phi(None, Y))
            self.assertTrue(np.all(gap <= phi.pl_constant * bound + 1e-12), msg=phi.tag)
        self.assertEqual(coordinate_power(1, 0).pl_constant, 0.0)
        self.assertEqual(coordinate_power(1, 3).pl_constant, np.inf)
        self.assertAlmostEqual(make_test_function("indicator-smoothed", t=1, width=0.2).pl_constant,
                               1.25)
        print("Test 9: Pseudo-Lipschitz constants passed")

    def test_10_gap_ignores_seed_order(self):
        """Test 10: Reordering the seeds leaves gap, reference and se unchanged; se stays positive"""
        S, T = dense_setup(80, rho=0.2)
        h = make_activation("tanh")
        de = de_run(S, h, 1.0, t_max=2)
        trajectories = [run_ampz(S, T, h, seed=seed, t_max=2, de=de)[0] for seed in range(5)]
        phi = coordinate_power(2, 2)
        report = convergence_gap(trajectories, de, phi, mc_samples=20_000)
        for order in ([4, 2, 0, 3, 1], [1, 0, 4, 3, 2]):
            shuffled = convergence_gap([trajectories[k] for k in order], de, phi, mc_samples=20_000)
            self.assertEqual(shuffled.gap, report.gap)
            self.assertEqual(shuffled.reference, report.reference)
            self.assertEqual(shuffled.empirical, report.empirical)
            self.assertEqual(shuffled.se, report.se)
            self.assertEqual(shuffled.seeds, order)

        constant = convergence_gap(trajectories, de, coordinate_power(1, 0), mc_samples=1_000)
        self.assertAlmostEqual(constant.reference, 1.0, delta=1e-12)
        self.assertGreater(constant.se, 0.0)
        with self.assertRaises(ValidationError):
            GapReport(n=10, t=1, phi_tag="x1^2", variant="AMPZ", empirical=0.0, reference=0.0,
                      gap=0.0, se=0.0, seeds=[0])
        print("Test 10: Seed order passed")


def brute_force_trees(n, q, d, t, root_type, mark, exclude_type=None):
    """Every ordered labeled tree of depth <= t, filtered by LabeledTree.violations"""
    zero = (0,) * q
    exponents = list(itertools.product(range(d + 1), repeat=q))
    levels = {}
    for depth in range(t, 0, -1):
        nodes = []
        for vtype in range(n):
            for vmark in range(q):
                if depth == t:
                    nodes.extend((vtype, vmark, c, ()) for c in exponents)
                    continue
                for m in range(d + 1):
                    nodes.extend((vtype, vmark, zero, kids)
                                 for kids in itertools.product(levels[depth + 1], repeat=m))
        levels[depth] = nodes

    found = []
    for top in levels[1]:
        parents, types, marks, exps = [-1], [root_type], [-1], [zero]
        stack = [(top, 0)]
        while stack:
            (vtype, vmark, c, kids), parent = stack.pop()
            index = len(parents)
            parents.append(parent)
            types.append(vtype)
            marks.append(vmark)
            exps.append(c)
            stack.extend((kid, index) for kid in reversed(kids))
        tree = LabeledTree(tuple(parents), tuple(types), tuple(marks), tuple(exps), t)
        if tree.violations(n, q, d) or marks[1] != mark or types[1] == exclude_type:
            continue
        found.append(tuple(tree.to_lines()))
    return found


class TestTreeOracle(unittest.TestCase):

    def test_1_tree_counts(self):
        """Test 1: Closed-form counts on small cases"""
        self.assertEqual(count_nb_trees(3, 1, 1, 1), 4)
        self.assertEqual(count_nb_trees(2, 1, 2, 2, exclude_type=1), 0)
        self.assertEqual(len(enumerate_nb_trees(3, 1, 1, 1, root_type=0, mark=0)), 4)
        self.assertEqual(count_nb_trees(3, 1, 2, 2), 26)
        print("Test 1: Tree counts passed")

    def test_2_enumeration_matches_brute_force(self):
        """Test 2: Enumerated trees equal the brute-force set for n <= 3"""
        cases = [(3, 1, 2, 2, None), (3, 1, 2, 2, 2), (2, 1, 2, 2, None), (3, 2, 1, 2, None),
                 (3, 1, 1, 3, 1)]
        for n, q, d, t, exclude in cases:
            for mark in range(q):
                expected = brute_force_trees(n, q, d, t, 0, mark, exclude)
                trees = enumerate_nb_trees(n, q, d, t, root_type=0, mark=mark, exclude_type=exclude)
                listed = [tuple(tree.to_lines()) for tree in trees]
                self.assertEqual(len(listed), len(set(listed)))
                self.assertEqual(set(listed), set(expected), msg=f"case {(n, q, d, t, exclude)}")
                self.assertEqual(len(listed), count_nb_trees(n, q, d, t, exclude))
                self.assertTrue(all(not tree.violations(n, q, d) for tree in trees))
        print("Test 2: Brute-force enumeration passed")

    def test_3_tree_identity_over_seeds(self):
        """Test 3: z recursion equals the tree sum to 1e-10 at n = 4, d = 2, t = 2 over 20 seeds"""
        S, T = dense_setup(4, rho=0.3, zero_diagonal=True)
        p = PolynomialFamily.univariate([0.3, 1.0, 0.5])
        x0 = np.array([1.0, -0.5, 0.8, 0.2])
        for seed in range(20):
            W = sample_t_correlated(S, T, seed=seed)
            report = verify_tree_identity(W, p, x0, t=2)
            self.assertLessEqual(report.max_gap, 1e-10, msg=f"seed {seed}")
            self.assertEqual(report.checks, 16)
        print("Test 3: Tree identity passed")

    def test_4_fresh_matrix_identity(self):
        """Test 4: y iterations equal the step-dependent tree sum"""
        S, T = dense_setup(4, rho=-0.2, zero_diagonal=True)
        p = PolynomialFamily.univariate([0.1, 0.9, -0.4])
        fresh = [sample_t_correlated(S, T, seed=100 + k) for k in range(2)]
        report = verify_tree_identity(None, p, 1.0, t=2, fresh_matrices=fresh)
        self.assertLessEqual(report.max_gap, 1e-10)
        print("Test 4: Fresh-matrix identity passed")

    def test_5_two_mark_identity(self):
        """Test 5: Tree identity for a two-mark family acting on pairs"""
        rng = np.random.default_rng(9)
        exponents = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
        p = PolynomialFamily(exponents=exponents, coefficients=rng.uniform(-1, 1, (2, 4, 1, 1)))
        S, T = dense_setup(3, zero_diagonal=True)
        W = sample_t_correlated(S, T, seed=5)
        report = verify_tree_identity(W, p, rng.standard_normal((3, 2)), t=2)
        self.assertLessEqual(report.max_gap, 1e-10)
        print("Test 5: Two-mark identity passed")

    def test_6_budget_and_diagonal_guards(self):
        """Test 6: Budget overruns and non-zero diagonals raise"""
        with self.assertRaises(BudgetExceededError):
            enumerate_nb_trees(7, 1, 1, 1, root_type=0, mark=0)
        with self.assertRaises(BudgetExceededError):
            enumerate_nb_trees(4, 1, 2, 2, root_type=0, mark=0, max_trees=10)
        with self.assertRaises(ZeroDiagonalRequiredError):
            z_recursion(np.eye(3), PolynomialFamily.univariate([0.0, 1.0]), 1.0, 2)
        print("Test 6: Guards passed")

    def test_7_polynomial_ampw_matches_z_for_identity(self):
        """Test 7: With p(x) = x the AMPW iterate x^2 equals z^2"""
        S, T = dense_setup(5, zero_diagonal=True)
        W = sample_t_correlated(S, T, seed=1)
        p = PolynomialFamily.univariate([0.0, 1.0])
        x0 = np.arange(1.0, 6.0)
        traj = run_polynomial_ampw(W, p, x0, 2)
        z = z_recursion(W, p, x0, 2)
        np.testing.assert_allclose(traj.x(2), z.node[2][:, 0], atol=1e-12)
        print("Test 7: Polynomial AMPW passed")

    def test_8_moment_comparison(self):
        """Test 8: Second moments of x, y and z agree within the reported SE"""
        S, T = dense_setup(3, rho=0.4, zero_diagonal=True)
        p = PolynomialFamily.univariate([0.0, 1.0])
        frame = moment_comparison(S, T, p, 1.0, t=2, samples=20_000, seed=2, batch=5_000)
        self.assertEqual(len(frame), 2 * 2 * 3)
        second = frame[frame["m"] == 1]
        xz = second[second["pair"] == "x-z"]
        self.assertTrue((xz["diff"].abs() < 1e-10).all())
        yz = second[second["pair"] == "y-z"]
        self.assertTrue((yz["diff"].abs() < 5 * yz["se"]).all())
        print("Test 8: Moment comparison passed")

    def test_9_violations_flag_backtracking(self):
        """Test 9: A path returning to its grandparent's type is rejected"""
        tree = LabeledTree(parents=(-1, 0, 1), types=(0, 1, 0), marks=(-1, 0, 0),
                           exponents=((0,), (0,), (1,)), horizon=2)
        problems = tree.violations(3, 1, 1)
        self.assertTrue(any("backtracks" in problem for problem in problems))
        print("Test 9: Violations passed")

    def test_10_tree_dump_round_trip(self):
        """Test 10: Dumped trees read back with the same structure"""
        trees = enumerate_nb_trees(3, 2, 1, 2, root_type=1, mark=1)
        text = dump_trees(trees)
        self.assertEqual(text.count("\n\n"), len(trees) - 1)
        restored = load_trees(text, horizon=2)
        self.assertEqual(len(restored), len(trees))
        for tree, again in zip(trees, restored):
            self.assertEqual(again.parents, tree.parents)
            self.assertEqual(again.types, tree.types)
            self.assertEqual(again.marks, tree.marks)
            self.assertEqual(again.exponents, tree.exponents)
            self.assertEqual(again.violations(3, 2, 1), [])
        print("Test 10: Tree dump passed")


class TestLotkaVolterra(unittest.TestCase):

    def test_1_zero_interactions(self):
        """Test 1: A = 0 gives x* = 1/2"""
        A = SampledMatrix.from_matrix(np.zeros((10, 10)))
        result = lv_equilibrium(A)
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.x_star, 0.5, atol=1e-10)
        self.assertEqual(result.surviving_fraction, 1.0)
        print("Test 1: Zero interactions passed")

    def test_2_diagonal_closed_form(self):
        """Test 2: Diagonal A gives z_i = 1 / (2 - a_i)"""
        a = np.linspace(-0.9, 0.9, 10)
        result = lv_equilibrium(SampledMatrix.from_matrix(np.diag(a)))
        np.testing.assert_allclose(result.z, 1 / (2 - a), atol=1e-9)
        print("Test 2: Diagonal closed form passed")

    def test_3_random_interactions_converge(self):
        """Test 3: Random interactions with ||A|| <= 0.5 converge with residual <= 1e-10"""
        S, T = dense_setup(500)
        A = scale_interactions(sample_t_correlated(S, T, seed=0), 0.2)
        result = lv_equilibrium(A)
        self.assertTrue(result.converged)
        self.assertLessEqual(result.residual, 1e-10)
        self.assertLessEqual(result.spectral_norm, 0.5)
        self.assertAlmostEqual(lv_residual(A, result.z), result.residual)
        print("Test 3: Random interactions passed")

    def test_4_bad_parameters_and_iteration_cap(self):
        """Test 4: Invalid tol raises; hitting max_iter is reported, not raised"""
        A = SampledMatrix.from_matrix(np.diag(np.full(4, 0.5)))
        with self.assertRaises(PreconditionError):
            lv_equilibrium(A, tol=0.0)
        result = lv_equilibrium(A, max_iter=1, report_norm=False)
        self.assertFalse(result.converged)
        self.assertIsNone(result.spectral_norm)
        print("Test 4: Iteration cap passed")


def minimal_config(**overrides) -> ExperimentConfig:
    payload = {
        "experiment_id": "unit-minimal",
        "profile": {"family": "dense"},
        "activation": {"family": "identity"},
        "n": [100],
        "seeds": [0],
        "t_max": 2,
        "verification": {"mc_samples": 2000},
    }
    payload.update(overrides)
    return ExperimentConfig.model_validate(payload)


class TestExperimentState(unittest.TestCase):

    def test_1_config_serialization(self):
        """Test 1: Config survives a JSON dump and load; the hash is stable"""
        config = minimal_config(correlation={"rho": 0.25}, spike={"strength": 1.5})
        restored = ExperimentConfig.model_validate_json(config.model_dump_json())
        self.assertEqual(restored, config)
        self.assertEqual(config_hash(restored), config_hash(config))
        self.assertEqual(len(config_hash(config)), 12)
        print("Test 1: Config serialization passed")

    def test_2_config_validation(self):
        """Test 2: Unknown keys and rho outside [-1, 1] are rejected"""
        with self.assertRaises(ValidationError):
            minimal_config(colour="blue")
        with self.assertRaises(ValidationError):
            minimal_config(correlation={"rho": 2})
        with self.assertRaises(ValidationError):
            minimal_config(profile={"family": "d-regular"})
        print("Test 2: Config validation passed")

    def test_3_stage_routing(self):
        """Test 3: next_stage walks the plan and stops on failure"""
        config = minimal_config()
        state = ExperimentState(experiment_id="x", n=100, seed=0, config=config,
                                config_hash=config_hash(config), output_dir="unused",
                                planned_stages=["sample", "density_evolution"])
        self.assertEqual(state.next_stage(), "sample")
        state.completed_stages.append("sample")
        self.assertEqual(state.next_stage(), "density_evolution")
        state.overall_status = StageStatus.FAILED
        self.assertIsNone(state.next_stage())
        self.assertEqual(state.cell_id, "n100_seed0")
        print("Test 3: Stage routing passed")

    def test_4_stage_metrics(self):
        """Test 4: Stage metrics tracking"""
        config = minimal_config()
        state = ExperimentState(experiment_id="x", n=100, seed=0, config=config,
                                config_hash=config_hash(config), output_dir="unused")
        state.update_stage_metrics("amp", success=True, duration_ms=100)
        state.update_stage_metrics("amp", success=False, duration_ms=200)
        metrics = state.stage_metrics["amp"]
        self.assertEqual(metrics.executions, 2)
        self.assertEqual(metrics.successes, 1)
        self.assertAlmostEqual(metrics.average_duration_ms, 150.0)
        print("Test 4: Stage metrics passed")


class TestPipeline(unittest.TestCase):
    """End-to-end runs of the LangGraph pipeline"""

    EXPECTED_TABLES = ["spectral_norm", "de_state", "de_summary", "trajectory", "trajectory_summary",
                       "onsager_gap", "tree_oracle", "lv_equilibrium", "gap_report"]

    def run_experiment(self, config, out, plan="full"):
        return asyncio.run(ExperimentGraph().run_experiment(config, plan=plan, output_dir=out))

    def test_1_minimal_full_run(self):
        """Test 1: Minimal dense/identity config produces every table and a manifest"""
        with tempfile.TemporaryDirectory() as out:
            summary = self.run_experiment(minimal_config(), out)
            self.assertEqual(summary["status"], "completed")
            for name in self.EXPECTED_TABLES:
                path = Path(out) / f"{name}.csv"
                self.assertTrue(path.exists(), msg=name)
                self.assertTrue(path.read_text().startswith("schema_version,"))
            manifest = json.loads((Path(out) / "MANIFEST.json").read_text())
            self.assertEqual(manifest["status"], "completed")
            self.assertIsNone(manifest["failed_stage"])
            header = (Path(out) / "gap_report.csv").read_text().splitlines()[0]
            self.assertTrue(header.startswith("schema_version,experiment_id,config_hash,n,t"))
        print("Test 1: Minimal full run passed")

    def test_2_runs_are_byte_identical(self):
        """Test 2: Same config and seed give byte-identical CSVs"""
        config = minimal_config(seeds=[0, 1], n=[60, 80])
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            self.run_experiment(config, first)
            self.run_experiment(config, second)
            files = sorted(p.relative_to(first) for p in Path(first).rglob("*.csv"))
            self.assertGreater(len(files), 0)
            for relative in files:
                self.assertEqual((Path(first) / relative).read_bytes(),
                                 (Path(second) / relative).read_bytes(), msg=str(relative))
        print("Test 2: Determinism passed")

    def test_3_stage_failure_is_recorded(self):
        """Test 3: A failing stage marks the run failed and keeps earlier artifacts"""
        with tempfile.TemporaryDirectory() as out:
            with patch("stages.lotka_volterra_stage.lv_equilibrium",
                       side_effect=RuntimeError("solver exploded")):
                summary = self.run_experiment(minimal_config(), out)
            self.assertEqual(summary["status"], "failed")
            self.assertEqual(summary["failed_stage"], "lotka_volterra")
            manifest = json.loads((Path(out) / "MANIFEST.json").read_text())
            self.assertEqual(manifest["failed_stage"], "lotka_volterra")
            self.assertTrue((Path(out) / "trajectory.csv").exists())
            self.assertFalse((Path(out) / "lv_equilibrium.csv").exists())
        print("Test 3: Stage failure passed")

    def test_4_spiked_block_run(self):
        """Test 4: Spiked block experiment writes the mu schedule"""
        config = minimal_config(
            profile={"family": "block", "block_fractions": [0.4, 0.6]},
            correlation={"rho_matrix": [[0.5, -0.1], [-0.1, 0.2]]},
            spike={"strength": 1.5}, n=[100], seeds=[0, 1], t_max=3,
        )
        with tempfile.TemporaryDirectory() as out:
            summary = self.run_experiment(config, out, plan="verify")
            self.assertEqual(summary["status"], "completed")
            self.assertTrue((Path(out) / "mu_schedule.csv").exists())
            self.assertTrue((Path(out) / "gap_report.csv").exists())
        print("Test 4: Spiked block run passed")

    def make_cell(self, config, out, n=None, seed=0):
        n = n or config.n[0]
        state = ExperimentState(experiment_id=config.experiment_id, n=n, seed=seed, config=config,
                                config_hash=config_hash(config), output_dir=str(out))
        return state, CellContext(cell_id=state.cell_id)

    def test_5_stage_checks_and_dumps(self):
        """Test 5: Stages record the declared constants and write the matrix and tree dumps"""
        config = minimal_config(n=[40], tree_oracle={"n": 4, "t": 2})
        with tempfile.TemporaryDirectory() as out:
            state, context = self.make_cell(config, out)
            for stage in (SamplingStage(), DensityEvolutionStage()):
                state = stage.execute(state, context)
            context.trajectory = run_ampz(context.S, context.T, context.h, seed=0, t_max=2,
                                          de=context.de)[0]
            state = VerificationStage().execute(state, context)
            state = TreeOracleStage().execute(state, context)

            self.assertEqual(state.checks["assumption:lipschitz_bound"], 1.0)
            for k in (2, 4, 8, 16):
                self.assertIn(f"assumption:moment_constant:k{k}", state.checks)
            self.assertAlmostEqual(state.checks["assumption:moment_constant:k4"], 3 ** 0.25)
            np.testing.assert_allclose([state.checks["de:diag_bound:t1"],
                                        state.checks["de:diag_bound:t2"]], 1.0, atol=1e-10)
            self.assertEqual(state.checks["pl_constant:x1^2"], 1.0)

            restored = SampledMatrix.from_triplet_text(Path(state.artifacts["matrix"]).read_text())
            np.testing.assert_array_equal(restored.to_dense(), context.W.to_dense())
            trees = load_trees(Path(state.artifacts["trees"]).read_text(), horizon=2)
            self.assertEqual(len(trees), count_nb_trees(4, 1, 1, 2))

            large, large_context = self.make_cell(minimal_config(n=[300]), out)
            large = SamplingStage().execute(large, large_context)
            self.assertNotIn("matrix", large.artifacts)
        print("Test 5: Stage checks and dumps passed")

    def test_6_tree_oracle_uses_configured_x0(self):
        """Test 6: A file-based x0 reaches the tree oracle; a short cell x0 is rejected"""
        with tempfile.TemporaryDirectory() as out:
            values = np.linspace(-1.0, 2.0, 30)
            x0_path = Path(out) / "x0.txt"
            np.savetxt(x0_path, values)
            config = minimal_config(n=[30], x0={"kind": "file", "path": str(x0_path)},
                                    tree_oracle={"n": 4, "t": 2, "fresh_matrices": False})
            state, context = self.make_cell(config, out)
            with patch("stages.tree_oracle_stage.verify_tree_identity",
                       wraps=verify_tree_identity) as identity:
                state = TreeOracleStage().execute(state, context)
            np.testing.assert_array_equal(identity.call_args.args[2], values[:4])
            self.assertLessEqual(state.checks["tree:z_identity_gap"], 1e-10)

            short = minimal_config(n=[3], tree_oracle={"n": 4, "t": 2})
            short_state, short_context = self.make_cell(short, out)
            with self.assertRaises(DimensionMismatchError):
                TreeOracleStage().execute(short_state, short_context)
        print("Test 6: Tree oracle x0 passed")


class TestCli(unittest.TestCase):

    def write_config(self, directory, payload):
        path = Path(directory) / "config.json"
        path.write_text(json.dumps(payload, indent=2))
        return path

    def test_1_parse_seeds(self):
        """Test 1: Seed lists accept ranges and commas"""
        self.assertEqual(parse_seeds("0-2,5"), [0, 1, 2, 5])
        self.assertEqual(parse_seeds("7"), [7])
        print("Test 1: Seed parsing passed")

    def test_2_invalid_config_names_field_and_line(self):
        """Test 2: rho = 2 fails with the field path and its line"""
        with tempfile.TemporaryDirectory() as directory:
            path = self.write_config(directory, {"n": [50], "correlation": {"rho": 2}})
            with self.assertRaises(ConfigError) as ctx:
                load_config(path)
            message = str(ctx.exception)
            self.assertIn("correlation.rho", message)
            line = next(number for number, text in enumerate(path.read_text().splitlines(), 1)
                        if '"rho"' in text)
            self.assertIn(f"{path}:{line}:", message)
            self.assertEqual(main(["verify", "--config", str(path)]), 2)
        print("Test 2: Invalid config passed")

    def test_3_cli_run(self):
        """Test 3: amp subcommand exits 0 and writes trajectories"""
        with tempfile.TemporaryDirectory() as directory:
            path = self.write_config(directory, {"n": [50], "seeds": [3], "t_max": 2})
            out = Path(directory) / "results"
            self.assertEqual(main(["amp", "--config", str(path), "--out", str(out),
                                   "--seeds", "0-1"]), 0)
            self.assertTrue((out / "trajectory.csv").exists())
            cells = json.loads((out / "MANIFEST.json").read_text())["cells"]
            self.assertEqual(sorted(cells), ["n50_seed0", "n50_seed1"])
        print("Test 3: CLI run passed")


TEST_CASES = [TestProfiles, TestMatrixSampler, TestActivations, TestDensityEvolution,
              TestAmpEngine, TestVerification, TestTreeOracle, TestLotkaVolterra,
              TestExperimentState, TestPipeline, TestCli]


if __name__ == "__main__":
    print("Running AMP Laboratory unit tests...")
    print(f"Slow n = 4000 tests: {'enabled' if SLOW else 'skipped (AMPLAB_SLOW_TESTS=1 enables)'}\n")

    loader = unittest.TestLoader()
    suite = unittest.TestSuite(loader.loadTestsFromTestCase(case) for case in TEST_CASES)

    result = TestResultSummary()
    suite.run(result)

    counts = result.get_counts()
    print("\n" + "="*60)
    print("TEST SUMMARY")
    print("="*60)
    print(f"Total Tests Run: {counts['total']}")
    print(f"Passed: {counts['passed']}")
    print(f"Failed: {counts['failed']}")
    print(f"Errors: {counts['errors']}")
    print(f"Skipped: {counts['skipped']}")
    print(f"Success Rate: {(counts['passed']/counts['total']*100):.1f}%")
    print("="*60)

    for test, trace in result.failures + result.errors:
        print(f"\n[FAILED] {test.id()}\n{trace}")

    if counts['failed'] > 0 or counts['errors'] > 0:
        print("[FAILED] Some tests failed or had errors")
        exit(1)
    else:
        print("[SUCCESS] All tests passed!")
        exit(0)
