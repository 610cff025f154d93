"""
AMP Node
Runs the AMP recursion on the sampled matrix through the AmpStage.
"""

import asyncio

from state import ExperimentState
from stages.amp_stage import AmpStage
from stages.base_stage import stage_registry

amp_stage = AmpStage()
stage_registry.register(amp_stage)


async def amp_node(state: ExperimentState) -> ExperimentState:
    """AMP Node - iterates x^1..x^t_max and writes the trajectory tables."""
    return await asyncio.to_thread(amp_stage.run, state)
