"""Time-indexed simulation records and their CSV round-trip.

A trace is a fixed grid of timestamps plus named scalar columns.  CSV
emission uses 17 significant digits so that a re-read trace reproduces
every derived statistic bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SimulationTrace:
    t: np.ndarray
    columns: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, col in self.columns.items():
            if len(col) != len(self.t):
                raise ValueError(f"column {name!r} length {len(col)} != {len(self.t)}")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def column_block(self, prefix: str) -> np.ndarray:
        """Stack columns named ``<prefix>1``, ``<prefix>2``, ... into an (N, k) array."""
        names = sorted(
            (n for n in self.columns if n.startswith(prefix) and n[len(prefix):].isdigit()),
            key=lambda n: int(n[len(prefix):]),
        )
        if not names:
            raise KeyError(f"no columns with prefix {prefix!r}")
        return np.column_stack([self.columns[n] for n in names])

    @property
    def column_names(self) -> list[str]:
        return list(self.columns)


def emit_trace(trace: SimulationTrace, path) -> None:
    """Write a trace as CSV, one row per integrator step."""
    names = trace.column_names
    cols = [trace.t] + [trace.columns[n] for n in names]
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + names) + "\n")
        for row in zip(*cols):
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_trace(path) -> SimulationTrace:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header[0] != "t":
        raise ValueError(f"malformed trace header in {path}")
    cols = {name: data[:, i + 1] for i, name in enumerate(header[1:])}
    return SimulationTrace(t=data[:, 0], columns=cols)


def trace_content_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
