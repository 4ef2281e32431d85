"""Trajectory and context containers shared across the package."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError

PHASES = ("pre", "cor", "post", "full")
CONTEXT_KINDS = ("perfect_corridor", "perfect_object", "autoencoder_latent", "none")


@dataclass(frozen=True)
class Trajectory:
    """Time-normalised sequence of gripper positions.

    ``t`` is strictly increasing from 0 to 1 and ``values`` has one row per
    time stamp.
    """

    t: np.ndarray
    values: np.ndarray
    phase: str = "full"
    std: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != t.shape[0]:
            raise DimensionError(f"trajectory values {values.shape} do not match {t.shape[0]} times")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if t.size and (t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0)):
            raise ContractViolation("trajectory times must increase strictly from 0 to 1")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.t.shape[0]

    @property
    def start(self):
        return self.values[0]

    @property
    def end(self):
        return self.values[-1]

    def as_array(self):
        """Stack ``[t, values]`` into an ``(N, 1 + dim)`` array."""
        return np.column_stack([self.t, self.values])


@dataclass(frozen=True)
class ContextVector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if self.kind not in CONTEXT_KINDS:
            raise ValueError(f"unknown context kind {self.kind!r}")
        if self.kind in ("perfect_corridor", "perfect_object") and values.shape != (1,):
            raise DimensionError("perfect contexts are one-dimensional")
        if self.kind == "autoencoder_latent" and values.shape != (8,):
            raise DimensionError(f"autoencoder contexts have 8 values, got {values.shape[0]}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]


def uniform_grid(n=200):
    return np.linspace(0.0, 1.0, n)
