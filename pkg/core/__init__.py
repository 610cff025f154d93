"""
Numerical Core of the AMP Laboratory
Profiles, matrix sampling, activations, density evolution, the AMP engine,
verification statistics, the tree oracle and Lotka-Volterra equilibria.
Pipeline stages (stages/) call into these modules; nothing here knows about the graph.
"""
