"""Spatial and temporal treatment-effect boundaries from reaction-diffusion panels.

Modules
-------
panel
    Panel data, exposure fields and CSV I/O.
greens
    Green's functions of the screened diffusion operator.
simulate
    Seeded panel simulator.
estimate
    Three-stage estimator of decay rates and boundaries.
inference
    Standard errors, bootstrap and hypothesis tests.
montecarlo
    Replication harness and table presets.
cli
    Command-line entry point.
"""

from .errors import (
    DecayAssumptionViolated,
    InsufficientDataError,
    MonteCarloAborted,
    NumericalError,
    ParseError,
    SimulationDivergedError,
    SingularDesignError,
    SingularityError,
    SpillboundError,
    StageError,
    ValidationError,
)
from .estimate import EstimationResult, StageConfig, compute_boundaries, run_pipeline
from .greens import BoundaryCondition, GreensSpec, bessel_k0, greens_matrix, greens_value
from .inference import TestReport, panel_bootstrap, run_inference
from .montecarlo import McConfig, McSummary, run_mc, run_preset
from .panel import PanelDataset, load_csv, write_csv
from .params import DiffusionParams
from .simulate import SimConfig, baseline_config, simulate, simulate_powerlaw

__version__ = "0.1.0"

__all__ = [
    "BoundaryCondition",
    "DecayAssumptionViolated",
    "DiffusionParams",
    "EstimationResult",
    "GreensSpec",
    "InsufficientDataError",
    "McConfig",
    "McSummary",
    "MonteCarloAborted",
    "NumericalError",
    "PanelDataset",
    "ParseError",
    "SimConfig",
    "SimulationDivergedError",
    "SingularDesignError",
    "SingularityError",
    "SpillboundError",
    "StageConfig",
    "StageError",
    "TestReport",
    "ValidationError",
    "baseline_config",
    "bessel_k0",
    "compute_boundaries",
    "greens_matrix",
    "greens_value",
    "load_csv",
    "panel_bootstrap",
    "run_inference",
    "run_mc",
    "run_pipeline",
    "run_preset",
    "simulate",
    "simulate_powerlaw",
    "write_csv",
    "__version__",
]
