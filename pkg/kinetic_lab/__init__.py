"""
Kinetic Lab

Numerical experiments for the linearized hard-sphere Boltzmann equation on a
periodic box: collision operator assembly, per-mode spectra, Green-function
decomposition, kinetic-wave cascades and mixture estimates.
"""

from kinetic_lab.collision import CollisionOperator, assemble_collision
from kinetic_lab.errors import LabError
from kinetic_lab.pipeline import run_scenario
from kinetic_lab.report import emit_report
from kinetic_lab.scenario import Scenario, load_scenario
from kinetic_lab.velocity_grid import VelocityGrid, build_grid

__version__ = "0.1.0"

__all__ = [
    "CollisionOperator",
    "LabError",
    "Scenario",
    "VelocityGrid",
    "assemble_collision",
    "build_grid",
    "emit_report",
    "load_scenario",
    "run_scenario",
]
