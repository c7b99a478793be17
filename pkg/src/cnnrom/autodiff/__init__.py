"""Minimal reverse-mode automatic differentiation for small CNNs."""
from . import ops
from .gradcheck import grad_check
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .params import ParamStore, kaiming_normal
from .tape import Tape, Var, record

__all__ = [
    "AdamState", "CosineSchedule", "ParamStore", "Tape", "Var", "adam_step",
    "cosine_lr", "grad_check", "kaiming_normal", "ops", "record",
]
