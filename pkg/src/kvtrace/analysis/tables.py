"""Plot-ready result tables and their CSV encodings."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return ""
        return repr(x)
    return str(x)


@dataclass
class DistributionTable:
    """Empirical distribution: sorted values with CDF points and summary stats.

    Percentiles use the inverted-CDF definition (the smallest sample whose
    CDF reaches q), so they are always observed values.
    """

    values: np.ndarray
    cdf: np.ndarray
    count: int
    mean: float
    p50: float
    p90: float
    p99: float
    label: str = ""

    @classmethod
    def from_values(cls, values: Sequence[float], label: str = "") -> "DistributionTable":
        v = np.sort(np.asarray(values, dtype=np.float64))
        n = int(v.size)
        if n == 0:
            empty = np.empty(0)
            return cls(empty, empty, 0, math.nan, math.nan, math.nan, math.nan, label)
        # collapse duplicates: CDF at the last occurrence of each value
        uniq, last = np.unique(v[::-1], return_index=True)
        cdf = (n - last) / n
        p = np.percentile(v, [50, 90, 99], method="inverted_cdf")
        return cls(uniq, cdf, n, float(v.mean()), float(p[0]), float(p[1]), float(p[2]), label)

    @property
    def empty(self) -> bool:
        return self.count == 0

    def percentile(self, q: float) -> float:
        if self.empty:
            return math.nan
        idx = int(np.searchsorted(self.cdf, q / 100.0 - 1e-12, side="left"))
        return float(self.values[min(idx, len(self.values) - 1)])

    def cdf_at(self, x: float) -> float:
        if self.empty:
            return math.nan
        i = int(np.searchsorted(self.values, x, side="right"))
        return float(self.cdf[i - 1]) if i else 0.0

    def summary(self) -> dict:
        return {
            "label": self.label,
            "count": self.count,
            "empty": self.empty,
            "mean": None if self.empty else self.mean,
            "p50": None if self.empty else self.p50,
            "p90": None if self.empty else self.p90,
            "p99": None if self.empty else self.p99,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["value", "cdf"])
        for v, c in zip(self.values, self.cdf):
            w.writerow([_fmt(v), _fmt(c)])
        return buf.getvalue()


@dataclass
class HeatmapTable:
    """Matrix with labelled rows and columns. NaN marks an absent cell."""

    row_labels: list
    col_labels: list
    values: np.ndarray
    corner: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError("heatmap shape does not match its labels")

    def cell(self, row, col) -> float:
        return float(self.values[self.row_labels.index(row), self.col_labels.index(col)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.corner] + [_fmt(c) for c in self.col_labels])
        for label, row in zip(self.row_labels, self.values):
            w.writerow([_fmt(label)] + [_fmt(x) for x in row])
        return buf.getvalue()


@dataclass
class Curve:
    """Monotone x/y curve (Lorenz-style shares, capacity over time, ...)."""

    x: np.ndarray
    y: np.ndarray
    x_name: str = "x"
    y_name: str = "y"

    def at(self, x: float) -> float:
        """Step value: y at the last point with x_i <= x (0 before the first)."""
        i = int(np.searchsorted(self.x, x, side="right"))
        return float(self.y[i - 1]) if i else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.x_name, self.y_name])
        for a, b in zip(self.x, self.y):
            w.writerow([_fmt(a), _fmt(b)])
        return buf.getvalue()


def lorenz(counts: Sequence[float], x_name: str = "share_of_items", y_name: str = "cumulative_share") -> Curve:
    """Items sorted by descending count: share of items vs share of the total."""
    c = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    n = c.size
    total = c.sum()
    x = np.arange(1, n + 1) / n if n else np.empty(0)
    y = np.cumsum(c) / total if total > 0 else np.zeros(n)
    return Curve(x, y, x_name, y_name)
