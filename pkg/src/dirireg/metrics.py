"""Fit-quality measures for compositional estimates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class FitStatistics:
    sce: float
    coverage: float
    std_width: float
    predictive_coverage: float = float("nan")

    def __post_init__(self):
        if self.sce < 0 or self.std_width < 0:
            raise DomainError("sce and std_width must be non-negative")
        for name in ("coverage", "predictive_coverage"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


def clr(x) -> np.ndarray:
    """Centred log-ratio transform of each row."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("clr needs strictly positive components (replace zeros first)")
    lx = np.log(x)
    return lx - lx.mean(axis=-1, keepdims=True)


def aitchison_distance(a, b) -> float | np.ndarray:
    """Euclidean distance between clr transforms; row-wise for 2-d input."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError("compositions differ in shape")
    d = np.sqrt(np.sum((clr(a) - clr(b)) ** 2, axis=-1))
    return float(d) if d.ndim == 0 else d


def sce(estimated, target) -> float:
    """Sum over rows of the Aitchison distance between estimate and target."""
    estimated = np.atleast_2d(estimated)
    target = np.atleast_2d(target)
    if estimated.shape != target.shape:
        raise DimensionError(f"shape mismatch {estimated.shape} vs {target.shape}")
    return float(np.sum(aitchison_distance(estimated, target)))


def coverage_and_width(lower, upper, truth, expected) -> tuple[float, float]:
    """Fraction of entries inside their interval, and mean width / expected value."""
    lower, upper, truth, expected = (np.asarray(a, dtype=float) for a in (lower, upper, truth, expected))
    if not (lower.shape == upper.shape == truth.shape == expected.shape):
        raise DimensionError("interval, truth and expected arrays must share a shape")
    if np.any(lower > upper):
        raise DomainError("lower bound above upper bound")
    if np.any(expected == 0):
        raise DomainError("cannot standardise by a zero expected value")
    cov = np.mean((lower <= truth) & (truth <= upper))
    width = np.mean((upper - lower) / expected)
    return float(cov), float(width)


def write_metrics_csv(stats: FitStatistics | dict, path) -> None:
    items = stats.as_dict() if isinstance(stats, FitStatistics) else dict(stats)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in items.items():
            w.writerow([k, repr(float(v))])
