"""PathNet: evolved pathways through a shared grid of neural modules, with transfer by freezing."""

from .evolution import EvolutionParams, Population, evolve_serial
from .experiment import ExperimentPlan, TransferOutcome, run_plan
from .network import NetConfig, ParameterGrid, forward
from .tasks import TaskSpec, make_binary_task, make_synthetic

__all__ = [
    "EvolutionParams", "ExperimentPlan", "NetConfig", "ParameterGrid", "Population", "TaskSpec",
    "TransferOutcome", "evolve_serial", "forward", "make_binary_task", "make_synthetic", "run_plan",
]
__version__ = "0.1.0"
