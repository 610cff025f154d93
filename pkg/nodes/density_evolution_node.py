"""
Density Evolution Node
Computes the DE covariances of the cell through the DensityEvolutionStage.
"""

import asyncio

from state import ExperimentState
from stages.base_stage import stage_registry
from stages.density_evolution_stage import DensityEvolutionStage

density_evolution_stage = DensityEvolutionStage()
stage_registry.register(density_evolution_stage)


async def density_evolution_node(state: ExperimentState) -> ExperimentState:
    return await asyncio.to_thread(density_evolution_stage.run, state)
