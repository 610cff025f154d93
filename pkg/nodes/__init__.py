"""
LangGraph Workflow Nodes
Organizes the node implementations of the AMP laboratory pipeline.

Graph definition is at root level (graph.py)
"""

from nodes.sample_node import sample_node
from nodes.density_evolution_node import density_evolution_node
from nodes.amp_node import amp_node
from nodes.verification_node import verification_node
from nodes.tree_oracle_node import tree_oracle_node
from nodes.lotka_volterra_node import lotka_volterra_node

__all__ = [
    "sample_node",
    "density_evolution_node",
    "amp_node",
    "verification_node",
    "tree_oracle_node",
    "lotka_volterra_node",
]
