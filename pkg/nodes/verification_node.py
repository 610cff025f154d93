"""
Verification Node
Compares the AMP trajectory with density evolution through the VerificationStage.
"""

import asyncio

from state import ExperimentState
from stages.base_stage import stage_registry
from stages.verification_stage import VerificationStage

verification_stage = VerificationStage()
stage_registry.register(verification_stage)


async def verification_node(state: ExperimentState) -> ExperimentState:
    return await asyncio.to_thread(verification_stage.run, state)
