"""Experiment orchestration and reporting."""

from .emit import emit_report, from_json
from .energy import EnergyModel, energy_estimate
from .experiment import ExperimentReport, ReportRow, layer_operands, run_experiment

__all__ = ["EnergyModel", "ExperimentReport", "ReportRow", "emit_report", "energy_estimate", "from_json",
           "layer_operands", "run_experiment"]
