"""
Lotka-Volterra Node
Solves the equilibrium of the random Lotka-Volterra system through the LotkaVolterraStage.
"""

import asyncio

from state import ExperimentState
from stages.base_stage import stage_registry
from stages.lotka_volterra_stage import LotkaVolterraStage

lotka_volterra_stage = LotkaVolterraStage()
stage_registry.register(lotka_volterra_stage)


async def lotka_volterra_node(state: ExperimentState) -> ExperimentState:
    return await asyncio.to_thread(lotka_volterra_stage.run, state)
