"""Named trainable tensors and batch-norm buffers."""
from __future__ import annotations

import copy

import numpy as np

from .ops import BNState
from .tape import Var


class ParamStore:
    """Ordered mapping of parameter name -> array, plus batch-norm running stats."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[str, BNState] = {}

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already defined")
        self.params[name] = np.array(value, dtype=float)
        return self.params[name]

    def add_bn(self, name: str, channels: int, momentum=0.9, eps=1e-5) -> BNState:
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BNState(channels, momentum, eps)
        return self.bn[name]

    def leaves(self, requires_grad: bool = True) -> dict[str, Var]:
        return {k: Var(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    @staticmethod
    def grads(leaves: dict[str, Var]) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(v.value) if v.grad is None else v.grad) for k, v in leaves.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return {k: np.asarray(v) for k, v in out.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {self.params[k].shape}")
            self.params[k] = np.array(state[k], dtype=float)
        for name, st in self.bn.items():
            st.mean = np.array(state[f"{name}.running_mean"], dtype=float)
            st.var = np.array(state[f"{name}.running_var"], dtype=float)


def kaiming_normal(rng, shape, fan_in, gain=np.sqrt(2.0)):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))
