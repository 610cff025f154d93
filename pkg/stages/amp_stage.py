"""
AMP Stage
Runs the AMP recursion of the cell with the configured Onsager variant,
or the non-centered recursion when the experiment carries a spike
"""

from core.amp_engine import amp_run, amp_run_noncentered
from core.errors import PreconditionError
from state import ExperimentState
from stages.base_stage import BaseStage, CellContext, build_activation, resolve_inputs


class AmpStage(BaseStage):

    def __init__(self, config=None):
        super().__init__("amp", config)

    def _validate_preconditions(self, state: ExperimentState, context: CellContext) -> bool:
        if context.W is None:
            raise PreconditionError("AMP stage needs a sampled matrix")
        return True

    def execute(self, state: ExperimentState, context: CellContext) -> ExperimentState:
        context.h = context.h or build_activation(state)
        x0, eta = resolve_inputs(state, context)
        config = state.config

        if config.spike is not None:
            traj = amp_run_noncentered(context.A, context.S, context.T, context.h, x0, eta,
                                       config.t_max, context.de)
        else:
            traj = amp_run(context.W, context.S, context.T, context.h, x0, eta,
                           variant=config.variant, t_max=config.t_max, de=context.de)
        context.trajectory = traj
        context.variant_runs[traj.variant.value] = traj

        self.write_table(state, "trajectory", self.with_cell_columns(state, traj.to_frame(), traj))
        summary = traj.summary()
        self.write_table(state, "trajectory_summary", self.with_cell_columns(state, summary, traj))
        for t, second in enumerate(summary["second_moment"], start=1):
            self.record_check(state, f"amp:second_moment:t{t}", second)
        return state

    @staticmethod
    def with_cell_columns(state: ExperimentState, frame, traj):
        frame = frame.copy()
        frame.insert(0, "variant", traj.variant.value)
        frame.insert(0, "seed", state.seed)
        frame.insert(0, "n", state.n)
        return frame
