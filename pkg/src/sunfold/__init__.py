"""Stochastic unfolding and homogenization of lattice spring networks.

Submodules: lattice, probability, unfolding, graph, corrector, statics, eris, cli.
"""

__version__ = "0.1.0"
