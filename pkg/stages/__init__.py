"""
Pipeline Stages
Each stage does the numerical work of one step of an (n, seed) cell;
the LangGraph nodes in nodes/ wrap them.
"""

from stages.base_stage import BaseStage, CellContext, cell_store, stage_registry
from stages.sampling_stage import SamplingStage
from stages.density_evolution_stage import DensityEvolutionStage
from stages.amp_stage import AmpStage
from stages.verification_stage import VerificationStage
from stages.tree_oracle_stage import TreeOracleStage
from stages.lotka_volterra_stage import LotkaVolterraStage

__all__ = [
    "BaseStage",
    "CellContext",
    "cell_store",
    "stage_registry",
    "SamplingStage",
    "DensityEvolutionStage",
    "AmpStage",
    "VerificationStage",
    "TreeOracleStage",
    "LotkaVolterraStage",
]
