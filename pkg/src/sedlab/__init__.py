"""sedlab: a three-tier numerical laboratory for sedimenting suspensions.

Tiers, coarse to fine:

* transport: inertialess density transport by its own Stokes flow,
* kinetic:   phase-space particle solver with fluid drag (Brinkman coupling),
* micro:     N spheres interacting through pairwise Oseen mobilities.

Plus optimal-transport metrics, modulated-energy diagnostics, and
closed-form two-scale decay envelopes used as oracles for the solvers.
"""

from . import bounds, kernels, kinetic, metrics, micro, transport
from .errors import (
    AssumptionError,
    CollisionError,
    ConvergenceError,
    DomainExhaustedError,
    SedlabError,
)

__all__ = [
    "bounds",
    "kernels",
    "kinetic",
    "metrics",
    "micro",
    "transport",
    "AssumptionError",
    "CollisionError",
    "ConvergenceError",
    "DomainExhaustedError",
    "SedlabError",
]

__version__ = "0.1.0"
