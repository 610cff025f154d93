"""
Sample Node
Builds the variance and correlation profiles of the cell and samples W through the SamplingStage.
"""

import asyncio

from state import ExperimentState
from stages.base_stage import stage_registry
from stages.sampling_stage import SamplingStage

# Initialize stage at module level
sampling_stage = SamplingStage()
stage_registry.register(sampling_stage)


async def sample_node(state: ExperimentState) -> ExperimentState:
    """
    Sample Node - validates the profile assumptions and draws the sampled matrix.

    Runs the stage in a worker thread so cells of a sweep sample concurrently.
    """
    return await asyncio.to_thread(sampling_stage.run, state)
