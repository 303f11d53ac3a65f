"""Low-rank plus Neumann-series (LRNS) solvers for collections of perturbed linear systems.

Submodules: ``linalg`` (dense kernels), ``lowrank`` (shared-basis compression),
``neumann`` (truncated series solver), ``fem`` (Q1 finite elements),
``randfield`` (Karhunen-Loeve fields), ``diffusion`` and ``control``
(applications), ``cli`` (command line).
"""

__version__ = "0.1.0"
