"""Monte-Carlo ensemble statistics and uncertainty calibration.

Two per-voxel uncertainty maps are available for an ensemble of warped
images: the predictive variance around the ensemble mean, and the
calibrated error around the fixed image.  They differ by exactly the
squared bias ``(mean - fixed)**2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import VolumeError

DEFAULT_SAMPLES = 25
DEFAULT_BINS = 15


@dataclass
class McEnsemble:
    samples: np.ndarray  # (T, H, W, L)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[0] < 2:
            raise VolumeError(f"ensemble needs T >= 2 samples of shape (H, W, L), got {self.samples.shape}")

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        return predictive_variance(self)

    def error(self, fixed) -> np.ndarray:
        return calibrated_error(self, fixed)


def mc_collect(sampler, T: int = DEFAULT_SAMPLES, rng=None) -> McEnsemble:
    """Draw ``T`` warped images from ``sampler(rng)`` in order."""
    if T < 2:
        raise VolumeError(f"need at least 2 Monte-Carlo samples, got {T}")
    samples = []
    for t in range(T):
        s = np.asarray(sampler(rng), dtype=np.float64)
        if samples and s.shape != samples[0].shape:
            raise VolumeError(f"sample {t} has shape {s.shape}, expected {samples[0].shape}")
        samples.append(s)
    return McEnsemble(np.stack(samples))


def predictive_variance(e: McEnsemble) -> np.ndarray:
    """Population variance (divisor T) of the samples around their mean."""
    return np.mean((e.samples - e.mean) ** 2, axis=0)


def calibrated_error(e: McEnsemble, fixed) -> np.ndarray:
    """Mean squared deviation of the samples from the fixed image."""
    fixed = np.asarray(fixed, dtype=np.float64)
    if fixed.shape != e.samples.shape[1:]:
        raise VolumeError(f"fixed image {fixed.shape} does not match samples {e.samples.shape[1:]}")
    return np.mean((e.samples - fixed) ** 2, axis=0)


@dataclass
class CalibrationTable:
    lo: np.ndarray
    hi: np.ndarray
    count: np.ndarray
    mean_uncertainty: np.ndarray
    mean_error: np.ndarray
    uce: float

    def rows(self):
        return zip(self.lo, self.hi, self.count, self.mean_uncertainty, self.mean_error)

    def to_csv(self, path, label: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# equal-width bins over raw (unnormalized) uncertainty; uce={self.uce!r}")
            fh.write(f"; estimator={label}\n" if label else "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count", "mean_uncertainty", "mean_error"])
            for lo, hi, n, mu, me in self.rows():
                w.writerow([repr(float(lo)), repr(float(hi)), int(n), repr(float(mu)), repr(float(me))])


def read_calibration_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def uce(pred_uncertainty, observed_sq_err, bins: int = DEFAULT_BINS) -> CalibrationTable:
    """Uncertainty calibration error over equal-width bins of the predicted uncertainty.

    ``UCE = sum_b (n_b / N) |mean_err_b - mean_unc_b|``.  Constant predictions
    fall into a single bin.
    """
    pred = np.asarray(pred_uncertainty, dtype=np.float64).ravel()
    obs = np.asarray(observed_sq_err, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise VolumeError("uncertainty and error maps must have the same size")
    if bins < 2:
        raise VolumeError(f"need at least 2 bins, got {bins}")
    lo, hi = float(pred.min()), float(pred.max())
    if hi == lo:
        edges = np.array([lo, hi])
        which = np.zeros(pred.size, dtype=np.int64)
    else:
        edges = np.linspace(lo, hi, bins + 1)
        which = np.clip(np.searchsorted(edges, pred, side="right") - 1, 0, bins - 1)
    nb = len(edges) - 1
    count = np.bincount(which, minlength=nb).astype(np.int64)
    sum_unc = np.bincount(which, weights=pred, minlength=nb)
    sum_err = np.bincount(which, weights=obs, minlength=nb)
    safe = np.maximum(count, 1)
    mean_unc = np.where(count > 0, sum_unc / safe, 0.0)
    mean_err = np.where(count > 0, sum_err / safe, 0.0)
    value = float(np.sum(count / pred.size * np.abs(mean_err - mean_unc)))
    return CalibrationTable(edges[:-1], edges[1:], count, mean_unc, mean_err, value)
