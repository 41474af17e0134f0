"""Error metrics and the scripted comparison designs."""

from .experiments import (
    DESIGNS,
    Cell,
    ExperimentResult,
    Lab,
    LabScale,
    evaluate_track,
    run_activity_comparison,
    run_design,
    run_forecast_sweep,
    run_input_variation,
    run_output_modes,
    run_recal_sweep,
    subject_seed,
    thin_radio,
)
from .metrics import ErrorReport, align, cep95_index, position_errors, settling_time, summarize

__all__ = [
    "DESIGNS", "Cell", "ExperimentResult", "Lab", "LabScale", "evaluate_track", "run_activity_comparison",
    "run_design", "run_forecast_sweep", "run_input_variation", "run_output_modes", "run_recal_sweep",
    "subject_seed", "thin_radio",
    "ErrorReport", "align", "cep95_index", "position_errors", "settling_time", "summarize",
]
