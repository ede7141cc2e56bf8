"""Greedy radionuclide identification with likelihood-ratio stopping.

The same forward-selection loop serves all three signature sources: with
a fixed library every candidate is refitted by EM, with a manifold or
shift model by block-coordinate descent.  After the greedy path stops,
radionuclides contributing less than ``contribution_floor`` of the
non-background counts are dropped.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .optimize import FitProblem, FitResult, fit
from .signatures import SignatureLibrary
from .variability import ShiftModel, SignatureManifold

logger = logging.getLogger(__name__)

MIN_CALIBRATION_SPECTRA = 1000
VARIABILITY = ("none", "manifold", "shift")


def default_threshold(expected_fpr: float) -> float:
    """Chi-square(1) upper quantile; conservative once the max over candidates is taken."""
    return float(chi2.ppf(1.0 - expected_fpr, df=1))


def variability_of(source) -> str:
    if isinstance(source, SignatureManifold):
        return "manifold"
    if isinstance(source, ShiftModel):
        return "shift"
    if isinstance(source, SignatureLibrary):
        return "none"
    raise TypeError(f"unsupported signature source {type(source).__name__}")


@dataclass(frozen=True)
class IdentifyConfig:
    expected_fpr: float = 0.01
    lrt_threshold: float | None = None
    contribution_floor: float = 0.01
    max_model_size: int | None = None
    variability: str = "none"

    def __post_init__(self):
        if not 0 < self.expected_fpr <= 1:
            raise ValueError(f"expected_fpr must be in (0, 1], got {self.expected_fpr}")
        if not 0 <= self.contribution_floor < 1:
            raise ValueError(f"contribution_floor must be in [0, 1), got {self.contribution_floor}")
        if self.variability not in VARIABILITY:
            raise ValueError(f"variability must be one of {VARIABILITY}, got {self.variability!r}")
        if self.max_model_size is not None and self.max_model_size < 0:
            raise ValueError("max_model_size must be >= 0")

    @property
    def threshold(self) -> float:
        if self.lrt_threshold is not None:
            return float(self.lrt_threshold)
        return default_threshold(self.expected_fpr)


@dataclass
class StepRecord:
    candidate: int
    name: str
    delta_nll: float
    statistic: float
    accepted: bool


@dataclass
class Identification:
    """Outcome of :func:`greedy_identify`; ``labels`` runs over the radionuclide columns only."""

    labels: np.ndarray
    fit: FitResult
    steps: list[StepRecord] = field(default_factory=list)
    removed: tuple[str, ...] = ()
    threshold: float = float("nan")

    def detected(self, names: Sequence[str]) -> list[str]:
        return [n for n, on in zip(names, self.labels) if on]


def _fit(y, source, active, a0=None, param0=None) -> FitResult:
    return fit(FitProblem(y, source, active), a0, param0)


def _best_candidate(y, source, active, current: FitResult):
    """Refit with every column not yet active; return ``(j, fit, delta_nll)`` of the largest drop."""
    n = source.n_components
    a_cur = current.a_active
    start = float(y.sum()) / (len(active) + 1)
    # variability fits restart their parameter search while only background is in the model
    param0 = current.param_hat if len(active) > 1 else None
    best = None
    for j in range(1, n):
        if j in active:
            continue
        res = _fit(y, source, list(active) + [j], np.append(a_cur, start), param0)
        drop = current.nll - res.nll
        if best is None or drop > best[2]:
            best = (j, res, drop)
    return best


def _check_source(source, config: IdentifyConfig):
    kind = variability_of(source)
    if kind != config.variability:
        raise ValueError(f"config.variability={config.variability!r} but the signature source is {kind!r}")


def greedy_identify(y, source, config: IdentifyConfig = IdentifyConfig()) -> Identification:
    """Forward selection of radionuclides stopped by a likelihood-ratio test.

    Starting from the background-only model, every absent radionuclide is
    tried; the one with the largest NLL drop is kept if ``2 * drop``
    exceeds the threshold.  Selection stops at the first rejection or when
    ``max_model_size`` radionuclides are in the model.
    """
    _check_source(source, config)
    y = np.asarray(y, dtype=float)
    names = source.names
    n = source.n_components
    max_size = n - 1 if config.max_model_size is None else min(config.max_model_size, n - 1)
    threshold = config.threshold

    active = [0]
    current = _fit(y, source, active)
    steps: list[StepRecord] = []
    while len(active) - 1 < max_size:
        j, res, drop = _best_candidate(y, source, active, current)
        stat = max(2.0 * drop, 0.0)
        accepted = bool(stat > threshold)
        steps.append(StepRecord(j, names[j], float(drop), float(stat), accepted))
        if not accepted:
            break
        active.append(j)
        current = res

    removed = []
    selected = active[1:]
    if selected and config.contribution_floor > 0:
        total = current.a_hat[selected].sum()
        keep = [j for j in selected if current.a_hat[j] >= config.contribution_floor * total]
        if len(keep) < len(selected):
            removed = [names[j] for j in selected if j not in keep]
            active = [0] + keep
            idx = [current.active.index(j) for j in active]
            current = _fit(y, source, active, current.a_active[idx], current.param_hat)

    labels = np.zeros(n - 1, dtype=bool)
    labels[[j - 1 for j in active[1:]]] = True
    return Identification(labels, current, steps, tuple(removed), threshold)


def apply_contribution_floor(a_hat, floor: float = 0.01) -> np.ndarray:
    """Radionuclide mask (background excluded) of entries reaching ``floor`` of the non-background total."""
    a = np.asarray(a_hat, dtype=float)[1:]
    return (a > 0) & (a >= floor * a.sum())


def first_step_statistic(y, source) -> float:
    """LRT statistic of the best single radionuclide against background only."""
    y = np.asarray(y, dtype=float)
    base = _fit(y, source, [0])
    _, _, drop = _best_candidate(y, source, [0], base)
    return max(2.0 * drop, 0.0)


def threshold_from_statistics(statistics, expected_fpr: float) -> float:
    """Empirical ``1 - expected_fpr`` quantile of null statistics."""
    stats = np.asarray(statistics, dtype=float)
    if stats.size == 0:
        raise ValueError("no statistics to calibrate on")
    if not 0 < expected_fpr <= 1:
        raise ValueError(f"expected_fpr must be in (0, 1], got {expected_fpr}")
    return float(np.quantile(stats, 1.0 - expected_fpr))


def calibrate_threshold(spectra, source, config: IdentifyConfig = IdentifyConfig(),
                        statistics=None) -> float:
    """LRT threshold giving ``config.expected_fpr`` on radionuclide-free validation spectra.

    ``statistics`` may carry precomputed :func:`first_step_statistic` values
    (e.g. from a parallel run) in the order of ``spectra``.
    """
    _check_source(source, config)
    spectra = np.asarray(spectra)
    if spectra.ndim != 2 or spectra.shape[0] < MIN_CALIBRATION_SPECTRA:
        got = spectra.shape[0] if spectra.ndim == 2 else 0
        raise ValueError(f"too few spectra for calibration: {got} < {MIN_CALIBRATION_SPECTRA}")
    if statistics is None:
        statistics = [first_step_statistic(y, source) for y in spectra]
    return threshold_from_statistics(statistics, config.expected_fpr)


# -- external predictions ----------------------------------------------------

class PredictionFileError(ValueError):
    pass


def write_predictions(path, indices, names: Sequence[str], values) -> None:
    """CSV with header ``index,<names>``; one row per spectrum."""
    values = np.asarray(values)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *names])
        for i, row in zip(indices, values):
            w.writerow([int(i), *(repr(float(v)) if values.dtype.kind == "f" else int(v) for v in row)])


def read_predictions(path, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, values)`` with value columns ordered as ``names``."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PredictionFileError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][0].strip() != "index":
        raise PredictionFileError(f"{path}: header must start with 'index'")
    header = [h.strip() for h in rows[0]]
    missing = [n for n in names if n not in header[1:]]
    if missing:
        raise PredictionFileError(f"{path}: missing radionuclide columns {missing}")
    cols = [header.index(n) for n in names]
    idx = np.empty(len(rows) - 1, dtype=np.int64)
    vals = np.empty((len(rows) - 1, len(names)))
    for r, row in enumerate(rows[1:]):
        try:
            idx[r] = int(row[0])
            vals[r] = [float(row[c]) for c in cols]
        except (ValueError, IndexError):
            raise PredictionFileError(f"{path}: malformed row {r + 1}: {row}") from None
    if np.any((vals < 0) | (vals > 1)) or not np.all(np.isfinite(vals)):
        raise PredictionFileError(f"{path}: prediction values must lie in [0, 1]")
    return idx, vals


def score_external_predictions(path, indices, names: Sequence[str], threshold: float = 0.5) -> np.ndarray:
    """Binary labels from an external prediction file (``value > threshold``).

    Rows must list exactly ``indices`` in order; anything else is an index
    mismatch.
    """
    idx, vals = read_predictions(path, names)
    indices = np.asarray(indices, dtype=np.int64)
    if idx.shape != indices.shape or np.any(idx != indices):
        raise PredictionFileError(
            f"index mismatch: prediction file has {idx.size} rows that do not line up with the "
            f"{indices.size} dataset indices")
    return vals > threshold
