"""Quasiregular sine map: evaluation, calibration, certified dynamics and rendering."""

from .calibration import CalibrationReport, calibrate
from .core import BeamIndex, BranchSpec, DomainError, MapParams, inverse_branch, s_eval
from .dynamics import certify_blowup, find_periodic, orbit, probe_density
from .invariants import run_suite

__version__ = "0.1.0"

__all__ = [
    "BeamIndex",
    "BranchSpec",
    "CalibrationReport",
    "DomainError",
    "MapParams",
    "calibrate",
    "certify_blowup",
    "find_periodic",
    "inverse_branch",
    "orbit",
    "probe_density",
    "run_suite",
    "s_eval",
]
