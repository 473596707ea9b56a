"""
Exception hierarchy for the kinetic lab.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import List, Optional


class LabError(Exception):
    """Base class for every error raised by the lab."""


class GridError(LabError, ValueError):
    """Invalid velocity grid parameters, axis, or mismatched grids."""


class ScaleGuardError(LabError, MemoryError):
    """Requested dense operator exceeds the configured size cap."""


class SingularKernelError(LabError, ValueError):
    """Kernel evaluated at coincident velocities."""


class SpectrumError(LabError):
    """Dense eigensolver failure."""

    def __init__(self, message: str, condition: Optional[float] = None):
        super().__init__(message)
        self.condition = condition


class BranchTrackingError(LabError):
    """Eigenvector overlap too small to follow a fluid branch."""


class FitRejectedError(LabError, ValueError):
    """Decay or branch fit could not be accepted."""


class GapScanError(LabError, ValueError):
    """|eps k| scan does not bracket the five-branch crossover."""


class DecompositionError(LabError, ValueError):
    """Green decomposition requested without the spectrum it needs."""


class AliasingError(LabError, ValueError):
    """Physical-space lattice too coarse for the retained modes."""


class ScenarioError(LabError, ValueError):
    """Invalid scenario configuration."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("Invalid scenario: " + "; ".join(self.problems))


class IncompleteArtifactError(LabError):
    """Report requested for a missing or incomplete artifact directory."""


class IntegrationError(LabError):
    """Cascade integration stayed unstable after the allowed step halvings."""
