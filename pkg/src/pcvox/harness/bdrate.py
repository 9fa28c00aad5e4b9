"""Bjontegaard delta rate between two rate-distortion curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
from scipy.integrate import trapezoid

N_SAMPLES = 100


@dataclass(frozen=True)
class RDCurve:
    """At least four ``(bpp, psnr)`` samples with strictly increasing, positive bpp."""

    samples: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        s = tuple((float(r), float(q)) for r, q in self.samples)
        if len(s) < 4:
            raise ValueError(f"an RD curve needs at least 4 samples, got {len(s)}")
        arr = np.array(s)
        if not np.all(np.isfinite(arr)):
            raise ValueError("RD samples must be finite")
        if np.any(arr[:, 0] <= 0):
            raise ValueError("bpp must be positive")
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise ValueError("bpp must be strictly increasing")
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_points(cls, points: Iterable[Tuple[float, float]]) -> "RDCurve":
        return cls(tuple(sorted(points)))

    @property
    def bpp(self) -> np.ndarray:
        return np.array([r for r, _ in self.samples])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([q for _, q in self.samples])


class NoOverlapError(ValueError):
    """The two curves share no PSNR interval."""


def bd_rate(ref: RDCurve, test: RDCurve, n_samples: int = N_SAMPLES) -> float:
    """Average rate difference of ``test`` against ``ref`` in percent.

    Log-rate is fitted as a cubic polynomial of PSNR for each curve and the
    difference is averaged over the common PSNR interval with the trapezoid
    rule. Negative means ``test`` needs fewer bits for the same quality.
    """
    lo = max(ref.psnr.min(), test.psnr.min())
    hi = min(ref.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise NoOverlapError(f"PSNR ranges do not overlap ({lo:.3f} >= {hi:.3f})")
    fit_ref = np.polyfit(ref.psnr, np.log(ref.bpp), 3)
    fit_test = np.polyfit(test.psnr, np.log(test.bpp), 3)
    q = np.linspace(lo, hi, n_samples)
    diff = np.polyval(fit_test, q) - np.polyval(fit_ref, q)
    avg = trapezoid(diff, q) / (hi - lo)
    return float((np.exp(avg) - 1.0) * 100.0)


__all__ = ["RDCurve", "NoOverlapError", "bd_rate", "N_SAMPLES"]
