"""Conditional Neural Movement Primitives with context input."""
from .backend import NAME as BACKEND
from .model import (CnmpModel, CnmpTrainer, count_parameters, generate_trajectory,
                    width_for_budget)

__all__ = ["BACKEND", "CnmpModel", "CnmpTrainer", "count_parameters", "generate_trajectory",
           "width_for_budget"]
