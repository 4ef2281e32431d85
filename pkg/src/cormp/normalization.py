"""Per-dimension z-scoring of trajectories and min-max scaling of contexts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 0.01  # metres; keeps constant dimensions from exploding


@dataclass(frozen=True)
class ZScore:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, arrays, floor=STD_FLOOR):
        stacked = np.vstack(arrays)
        return cls(tuple(stacked.mean(axis=0).tolist()),
                   tuple(np.maximum(stacked.std(axis=0), floor).tolist()))

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - np.array(self.mean)) / np.array(self.std)

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * np.array(self.std) + np.array(self.mean)

    def invert_std(self, std):
        return np.asarray(std, dtype=np.float64) * np.array(self.std)

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["mean"]), tuple(data["std"]))


@dataclass(frozen=True)
class MinMax:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]`` per dimension."""

    lo: tuple
    hi: tuple

    @classmethod
    def fit(cls, values):
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[0] == 1 and values.shape[1] > 1:
            values = values.T
        lo, hi = values.min(axis=0), values.max(axis=0)
        hi = np.where(hi - lo > 1e-12, hi, lo + 1e-12)
        return cls(tuple(lo.tolist()), tuple(hi.tolist()))

    def apply(self, values):
        lo, hi = np.array(self.lo), np.array(self.hi)
        return 2.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def invert(self, values):
        lo, hi = np.array(self.lo), np.array(self.hi)
        return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["lo"]), tuple(data["hi"]))
