"""Fault localisation and repair for models produced by model converters.

A Source model is the reference; a Target model is its converted counterpart.
The toolkit compares the two over a dataset, localises faults in six
categories and repairs the Target until their label rankings agree.
"""

from .engine import EvalSummary, RepairConfig, RepairOutcome, evaluate, localize, run_repair
from .injector import FaultSpec, inject, make_desk_model
from .ir import GraphModel, load_model, save_model

__all__ = [
    "EvalSummary", "FaultSpec", "GraphModel", "RepairConfig", "RepairOutcome", "evaluate", "inject",
    "load_model", "localize", "make_desk_model", "run_repair", "save_model",
]
__version__ = "0.1.0"
