"""
Sampling Stage
Builds the variance and correlation profiles of a cell, validates the structural
assumptions, samples W (and the spiked A) and estimates ||W||
"""

import math
from pathlib import Path
from typing import Tuple

import pandas as pd

from core.errors import DimensionMismatchError
from core.matrix_sampler import add_rank_one, estimate_spectral_norm, sample_t_correlated
from core.profiles import (
    CorrelationProfile, VarianceProfile, make_dense_profile, make_dregular_profile,
    validate_assumptions
)
from state import ExperimentConfig, ExperimentState, ProfileFamily
from stages.base_stage import (
    BaseStage, CellContext, build_activation, build_distribution, spike_vectors
)
from utils.artifacts import write_text


def build_profiles(config: ExperimentConfig, n: int) -> Tuple[VarianceProfile, CorrelationProfile]:
    """(S, T) for size n; d-regular labels use a fixed seed so every seed shares S"""
    spec = config.profile
    if spec.family == ProfileFamily.DREGULAR:
        S = make_dregular_profile(n, spec.degree, seed=0)
    elif spec.family == ProfileFamily.FILE:
        S = VarianceProfile.from_triplet_text(Path(spec.path).read_text(encoding="utf-8"),
                                              label=Path(spec.path).stem)
        if S.n != n:
            raise DimensionMismatchError(f"Profile file {spec.path} has n={S.n}, cell has n={n}")
    else:
        S = make_dense_profile(n, zero_diagonal=spec.zero_diagonal)

    correlation = config.correlation
    if spec.family in (ProfileFamily.BLOCK, ProfileFamily.MULTIBLOCK):
        sizes = spec.block_sizes(n)
        rho_matrix = correlation.rho_matrix
        if rho_matrix is None:
            rho_matrix = [[correlation.rho] * len(sizes) for _ in sizes]
        T = CorrelationProfile.from_blocks(sizes, rho_matrix)
    else:
        T = CorrelationProfile.constant(n, correlation.rho)
    return S, T


def ensure_profiles(state: ExperimentState, context: CellContext):
    if context.S is None or context.T is None:
        context.S, context.T = build_profiles(state.config, state.n)
    return context.S, context.T


class SamplingStage(BaseStage):
    """Profiles, assumption report, matrix sample and spectral norm"""

    def __init__(self, config=None):
        super().__init__("sample", config)

    def execute(self, state: ExperimentState, context: CellContext) -> ExperimentState:
        S, T = ensure_profiles(state, context)
        dist = build_distribution(state)

        report = validate_assumptions(S, nu=dist.nu)
        for check in [*report.checks, *dist.moment_checks()]:
            self.record_check(state, f"assumption:{check.name}", check.value, check.passed)

        context.h = context.h or build_activation(state)
        lipschitz = context.h.lipschitz_bound
        self.record_check(state, "assumption:lipschitz_bound", lipschitz,
                          passed=math.isfinite(lipschitz))

        profile_path = write_text(S.to_triplet_text(), state.cell_dir / f"profile_{S.profile_id}.txt")
        state.artifacts["profile"] = str(profile_path)

        context.W = sample_t_correlated(S, T, dist, seed=state.seed)
        self.logger.info(f"Sampled {context.W.matrix_id} (nnz={context.W.matrix.nnz}) "
                         f"for cell {state.cell_id}")
        if state.n <= state.config.dump_matrix_max_n:
            matrix_path = write_text(context.W.to_triplet_text(),
                                     state.cell_dir / f"matrix_{context.W.matrix_id}.txt")
            state.artifacts["matrix"] = str(matrix_path)

        if state.config.spike is not None:
            u, v = spike_vectors(state.n)
            context.A = add_rank_one(context.W, state.config.spike.strength, u, v)

        if state.config.spectral_norm:
            result = estimate_spectral_norm(context.W, max_iters=300, tol=1e-6, seed=state.seed)
            self.record_check(state, "spectral_norm", result.estimate)
            frame = pd.DataFrame([{"n": state.n, "seed": state.seed, "estimate": result.estimate,
                                   "iterations": result.iterations, "converged": result.converged}])
            self.write_table(state, "spectral_norm", frame)
        return state

    def _validate_postconditions(self, state: ExperimentState, context: CellContext) -> bool:
        return context.W is not None and context.W.n == state.n
