"""Run orchestration: config files, seeded sampling, runs, sweeps, CLI."""

from .config import SimConfig, default_config, load_config, parse_config_text
from .runner import RunRecord, fit_dmin_constant, run
from .sampling import SampleDraw, SampleReport, sample_initial
from .sweeps import (
    CompareReport,
    HydroReport,
    MeanfieldReport,
    compare_tiers,
    fit_s_relaxation,
    sweep_hydrodynamic,
    sweep_meanfield,
)

__all__ = [
    "SimConfig",
    "default_config",
    "load_config",
    "parse_config_text",
    "RunRecord",
    "fit_dmin_constant",
    "run",
    "SampleDraw",
    "SampleReport",
    "sample_initial",
    "CompareReport",
    "HydroReport",
    "MeanfieldReport",
    "compare_tiers",
    "fit_s_relaxation",
    "sweep_hydrodynamic",
    "sweep_meanfield",
]
