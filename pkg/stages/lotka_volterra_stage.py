"""
Lotka-Volterra Stage
Solves the equilibrium z = (A - I) z^+ + 1 for A = scale * W (plus the spike when configured)
"""

import pandas as pd

from core.errors import PreconditionError
from core.lotka_volterra import lv_equilibrium, scale_interactions
from core.matrix_sampler import add_rank_one
from state import ExperimentState
from stages.base_stage import BaseStage, CellContext, spike_vectors


class LotkaVolterraStage(BaseStage):

    def __init__(self, config=None):
        super().__init__("lotka_volterra", config)

    def _validate_preconditions(self, state: ExperimentState, context: CellContext) -> bool:
        if context.W is None:
            raise PreconditionError("Lotka-Volterra stage needs a sampled matrix")
        return True

    def execute(self, state: ExperimentState, context: CellContext) -> ExperimentState:
        spec = state.config.lotka_volterra
        A = scale_interactions(context.W, spec.interaction_scale)
        if state.config.spike is not None:
            u, v = spike_vectors(state.n)
            A = add_rank_one(A, state.config.spike.strength, u, v)

        result = lv_equilibrium(A, tol=spec.tol, max_iter=spec.max_iter, relaxation=spec.relaxation)
        self.record_check(state, "lv:residual", result.residual, passed=result.converged)
        self.record_check(state, "lv:surviving_fraction", result.surviving_fraction)

        frame = pd.DataFrame([{"n": state.n, "seed": state.seed, **result.to_record()}])
        self.write_table(state, "lv_equilibrium", frame)
        return state
