"""
Tree Oracle Node
Runs the exact small-n tree-sum checks through the TreeOracleStage.
"""

import asyncio

from state import ExperimentState
from stages.base_stage import stage_registry
from stages.tree_oracle_stage import TreeOracleStage

tree_oracle_stage = TreeOracleStage()
stage_registry.register(tree_oracle_stage)


async def tree_oracle_node(state: ExperimentState) -> ExperimentState:
    return await asyncio.to_thread(tree_oracle_stage.run, state)
