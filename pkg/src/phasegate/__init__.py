"""Targeted single-qubit gates from addressing-light phase shifts in a 3D atom array.

Modules: dynamics (pulse propagation), lattice (geometry and beams),
compiler (gate to pulse sequence), noise, simulate (Monte-Carlo shots),
experiments, analysis, config and cli.
"""

__version__ = "0.1.0"
