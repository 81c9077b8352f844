"""Synthetic pretrain/finetune world and the comparison studies built on it."""

from .scenario import ScenarioSpec, load_scenario
from .studies import STUDIES, Condition, SummaryTable, get_pretrained, run_conditions, run_study, write_study

__all__ = [
    "STUDIES",
    "Condition",
    "ScenarioSpec",
    "SummaryTable",
    "get_pretrained",
    "load_scenario",
    "run_conditions",
    "run_study",
    "write_study",
]
