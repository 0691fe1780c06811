"""Sorted samples of terminal statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class SampleSet:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def of(cls, values, **meta) -> "SampleSet":
        v = np.sort(np.asarray(values, dtype=float).ravel())
        v.setflags(write=False)
        return cls(v, meta)

    def __len__(self) -> int:
        return self.values.shape[0]

    def map(self, fn, **meta) -> "SampleSet":
        return SampleSet.of(fn(self.values), **{**self.meta, **meta})
