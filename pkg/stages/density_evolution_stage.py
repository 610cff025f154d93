"""
Density Evolution Stage
Computes the DE covariances R^1..R^t (and the mean schedule under a spike)
"""

import numpy as np

from core.density_evolution import de_run, de_run_noncentered
from state import ExperimentState
from stages.base_stage import (
    BaseStage, CellContext, build_activation, build_engine, resolve_inputs, spike_vectors
)
from stages.sampling_stage import ensure_profiles


class DensityEvolutionStage(BaseStage):

    def __init__(self, config=None):
        super().__init__("density_evolution", config)

    def execute(self, state: ExperimentState, context: CellContext) -> ExperimentState:
        S, _ = ensure_profiles(state, context)
        context.h = context.h or build_activation(state)
        x0, eta = resolve_inputs(state, context)
        cfg = build_engine(state)
        t_max = state.config.t_max

        if state.config.spike is not None:
            u, v = spike_vectors(state.n)
            context.de, schedule = de_run_noncentered(S, context.h, x0, eta,
                                                      state.config.spike.strength, u, v, t_max, cfg)
            mu_frame = schedule.to_frame()
            mu_frame.insert(0, "n", state.n)
            self.write_table(state, "mu_schedule", mu_frame)
        else:
            context.de = de_run(S, context.h, x0, eta, t_max=t_max, cfg=cfg)

        de = context.de
        rows = zip(de.variance_floor(), de.min_eigenvalues, de.diag_bound())
        for t, (floor, eig, bound) in enumerate(rows, start=1):
            self.record_check(state, f"de:variance_floor:t{t}", floor, passed=floor > 0)
            self.record_check(state, f"de:min_eigenvalue:t{t}", eig)
            self.record_check(state, f"de:diag_bound:t{t}", bound, passed=np.isfinite(bound))

        frame = de.to_frame()
        frame.insert(0, "n", state.n)
        self.write_table(state, "de_state", frame)
        summary = de.summary()
        summary.insert(0, "n", state.n)
        self.write_table(state, "de_summary", summary)
        return state

    def _validate_postconditions(self, state: ExperimentState, context: CellContext) -> bool:
        return context.de is not None and context.de.t_max == state.config.t_max
