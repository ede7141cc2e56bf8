"""Spectral signature libraries on a fixed energy-channel grid.

A library is the matrix ``X`` of normalized detector responses, one column
per component, with the natural background always stored first.  Columns
are validated and renormalized on construction so every downstream solver
can rely on ``X.sum(axis=0) == 1``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

BACKGROUND = "Bkg"
NORM_TOL = 1e-9

#: Main gamma lines (keV, relative intensity) used by the stand-in signatures.
NUCLIDE_LINES: dict[str, list[tuple[float, float]]] = {
    "Co-57": [(122.06, 85.6), (136.47, 10.7)],
    "Co-60": [(1173.23, 99.85), (1332.49, 99.98)],
    "Tc-99m": [(140.51, 89.0)],
    "I-123": [(158.97, 83.3), (528.96, 1.4)],
    "I-131": [(364.49, 81.5), (636.99, 7.2), (284.31, 6.1), (80.19, 2.6), (722.91, 1.8)],
    "Ba-133": [(356.01, 62.1), (80.998, 32.9), (302.85, 18.3), (383.85, 8.9), (276.40, 7.2)],
    "Cs-137": [(661.66, 85.1)],
    "Eu-152": [
        (121.78, 28.5), (344.28, 26.6), (1408.01, 21.0), (964.08, 14.5),
        (1112.08, 13.7), (778.90, 12.9), (1085.84, 10.1), (244.70, 7.6),
    ],
    "Am-241": [(59.54, 35.9)],
}

DEFAULT_NUCLIDES = tuple(NUCLIDE_LINES)
DEFAULT_RESOLUTION = 0.065
DEFAULT_CONTINUUM = 0.35
BACKGROUND_DECAY_KEV = 150.0


class SignatureError(ValueError):
    """Invalid signature data (shape, sign, or normalization problem)."""


@dataclass(frozen=True)
class ChannelGrid:
    """Uniform energy binning; channel ``i`` covers ``[e_min + i*w, e_min + (i+1)*w)``."""

    n_channels: int = 1024
    bin_width: float = 2.0
    e_min: float = 20.0

    def __post_init__(self):
        if int(self.n_channels) != self.n_channels or self.n_channels < 1:
            raise SignatureError(f"n_channels must be a positive integer, got {self.n_channels}")
        if not self.bin_width > 0:
            raise SignatureError(f"bin_width must be > 0, got {self.bin_width}")
        if not self.e_min >= 0:
            raise SignatureError(f"e_min must be >= 0, got {self.e_min}")

    @property
    def e_max(self) -> float:
        return self.e_min + self.n_channels * self.bin_width

    @property
    def edges(self) -> np.ndarray:
        return self.e_min + self.bin_width * np.arange(self.n_channels + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.e_min + self.bin_width * (np.arange(self.n_channels) + 0.5)

    def channel_of(self, energy):
        """Channel index containing ``energy`` (half-open bins; may be out of range)."""
        return np.floor((np.asarray(energy, dtype=float) - self.e_min) / self.bin_width).astype(int)

    def to_dict(self) -> dict:
        return {"n_channels": int(self.n_channels), "bin_width_kev": float(self.bin_width),
                "e_min_kev": float(self.e_min)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelGrid":
        return cls(int(d["n_channels"]), float(d["bin_width_kev"]), float(d["e_min_kev"]))


def normalize_columns(columns: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Validate a channel-by-component matrix and rescale every column to unit sum.

    Raises
    ------
    SignatureError
        On NaN/inf, negative entries or all-zero columns; the message names
        the offending row and column.
    """
    x = np.array(columns, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise SignatureError(f"signature matrix must be 2-D, got shape {x.shape}")
    label = (lambda j: f"column {j} ({names[j]})") if names is not None else (lambda j: f"column {j}")
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        r, c = bad[0]
        raise SignatureError(f"non-finite entry at row {r}, {label(c)}")
    neg = np.argwhere(x < 0)
    if neg.size:
        r, c = neg[0]
        raise SignatureError(f"negative entry {x[r, c]:g} at row {r}, {label(c)}")
    sums = x.sum(axis=0)
    for j in np.flatnonzero(sums <= 0):
        raise SignatureError(f"all-zero {label(j)}")
    off = np.abs(sums - 1.0) > NORM_TOL
    if off.any():
        logger.info("renormalizing %d signature column(s) with sums %s", off.sum(), sums[off])
        x = x / sums
        # second pass squeezes the last ulp of drift
        x = x / x.sum(axis=0)
    return x


@dataclass(frozen=True)
class SignatureLibrary:
    """Normalized signatures ``X`` (M channels by N components), background first."""

    grid: ChannelGrid
    names: tuple[str, ...]
    columns: np.ndarray = field(repr=False)

    param_bounds = None
    default_param = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        x = normalize_columns(self.columns, names)
        if x.shape[0] != self.grid.n_channels:
            raise SignatureError(
                f"dimension mismatch: {x.shape[0]} rows but grid has {self.grid.n_channels} channels")
        if x.shape[1] != len(names):
            raise SignatureError(f"dimension mismatch: {x.shape[1]} columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise SignatureError(f"duplicate names in {names}")
        if not names or names[0] != BACKGROUND:
            raise SignatureError(f"first column must be the background '{BACKGROUND}', got {names[:1]}")
        x.setflags(write=False)
        object.__setattr__(self, "columns", x)

    @property
    def n_channels(self) -> int:
        return self.columns.shape[0]

    @property
    def n_components(self) -> int:
        return self.columns.shape[1]

    @property
    def nuclides(self) -> tuple[str, ...]:
        """Names of the radionuclide columns (everything but the background)."""
        return self.names[1:]

    def column(self, name: str) -> np.ndarray:
        return self.columns[:, self.names.index(name)]

    def subset(self, names: Iterable[str]) -> "SignatureLibrary":
        names = list(names)
        if BACKGROUND not in names:
            names.insert(0, BACKGROUND)
        idx = [self.names.index(n) for n in names]
        return SignatureLibrary(self.grid, tuple(names), self.columns[:, idx])

    def matrix(self, param=None, columns=None) -> np.ndarray:
        return self.columns if columns is None else self.columns[:, columns]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.grid.to_dict(), sort_keys=True).encode())
        h.update("\x00".join(self.names).encode())
        h.update(np.ascontiguousarray(self.columns).tobytes())
        return h.hexdigest()


# -- I/O ---------------------------------------------------------------------

def grid_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".grid.json")


def read_signature_csv(path, grid: ChannelGrid) -> SignatureLibrary:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise SignatureError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SignatureError(f"{path}: empty file")
    names = [n.strip() for n in rows[0]]
    values = np.empty((len(rows) - 1, len(names)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(names):
            raise SignatureError(
                f"{path}: dimension mismatch at row {i}: {len(row)} values, {len(names)} names")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise SignatureError(f"{path}: parse failure at row {i}, column {j}: {cell!r}") from None
    return SignatureLibrary(grid, tuple(names), values)


def load_library(path, format: str | None = None) -> SignatureLibrary:
    """Load a signature library from CSV (+ grid sidecar) or a single JSON file.

    The format defaults to the file suffix.  Un-normalized columns are
    rescaled; negative or all-zero columns raise :class:`SignatureError`.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        sidecar = grid_sidecar_path(path)
        try:
            grid = ChannelGrid.from_dict(json.loads(sidecar.read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise SignatureError(f"cannot read grid sidecar {sidecar}: {exc}") from exc
        return read_signature_csv(path, grid)
    if fmt == "json":
        try:
            doc = json.loads(path.read_text())
            grid = ChannelGrid.from_dict(doc["grid"])
            names = doc["names"]
            cols = np.asarray(doc["columns"], dtype=float)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise SignatureError(f"parse failure in {path}: {exc}") from exc
        if cols.ndim != 2:
            raise SignatureError(f"{path}: dimension mismatch, columns must be a list of equal-length lists")
        return SignatureLibrary(grid, tuple(names), cols.T)
    raise SignatureError(f"unsupported signature format {fmt!r}")


def write_signature_csv(lib: SignatureLibrary, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(lib.names)
        for row in lib.columns:
            w.writerow([repr(float(v)) for v in row])


def save_library(lib: SignatureLibrary, path, format: str | None = None) -> Path:
    """Write ``lib``; CSV output also writes the ``<stem>.grid.json`` sidecar."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        write_signature_csv(lib, path)
        grid_sidecar_path(path).write_text(json.dumps(lib.grid.to_dict(), indent=2) + "\n")
    elif fmt == "json":
        doc = {"grid": lib.grid.to_dict(), "names": list(lib.names),
               "columns": [[float(v) for v in col] for col in lib.columns.T]}
        path.write_text(json.dumps(doc) + "\n")
    else:
        raise SignatureError(f"unsupported signature format {fmt!r}")
    return path


# -- parametric stand-in signatures ------------------------------------------

def fwhm(energy, resolution_at_662: float = DEFAULT_RESOLUTION):
    """Scintillator-like resolution scaling, FWHM proportional to sqrt(E)."""
    return resolution_at_662 * 662.0 * np.sqrt(np.asarray(energy, dtype=float) / 662.0)


def gaussian_peak(grid: ChannelGrid, energy: float, resolution_at_662: float) -> np.ndarray:
    """Gaussian line integrated exactly over each channel, renormalized on the grid."""
    sigma = fwhm(energy, resolution_at_662) / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    cdf = ndtr((grid.edges - energy) / sigma)
    p = np.diff(cdf)
    return p / p.sum()


def flat_shelf(grid: ChannelGrid, upper_energy: float) -> np.ndarray:
    """Uniform mass on every channel from ``e_min`` up to the one holding ``upper_energy``."""
    top = min(int(grid.channel_of(upper_energy)), grid.n_channels - 1)
    shelf = np.zeros(grid.n_channels)
    shelf[: top + 1] = 1.0
    return shelf / shelf.sum()


def _check_peaks(grid: ChannelGrid, peaks) -> np.ndarray:
    peaks = np.asarray(peaks, dtype=float).reshape(-1, 2) if len(peaks) else np.empty((0, 2))
    if peaks.shape[0] == 0:
        raise SignatureError("empty peak list")
    for e, inten in peaks:
        if not grid.e_min <= e < grid.e_max:
            raise SignatureError(f"peak at {e} keV outside grid [{grid.e_min}, {grid.e_max})")
        if not inten > 0:
            raise SignatureError(f"peak intensity must be > 0, got {inten}")
    return peaks


def synth_signature(grid: ChannelGrid, peaks, resolution_at_662: float = DEFAULT_RESOLUTION,
                    continuum_level: float = DEFAULT_CONTINUUM) -> np.ndarray:
    """Gaussian peaks on a flat Compton-like shelf.

    Parameters
    ----------
    grid : ChannelGrid
    peaks : sequence of (energy_keV, intensity)
        Intensities are relative; peaks must lie inside the grid.
    resolution_at_662 : float
        FWHM / E at 662 keV.
    continuum_level : float
        Fraction of the mass in the shelf, in ``[0, 1)``.

    Returns
    -------
    numpy.ndarray
        Column of length ``grid.n_channels`` summing to one.
    """
    peaks = _check_peaks(grid, peaks)
    if not 0 <= continuum_level < 1:
        raise SignatureError(f"continuum_level must be in [0, 1), got {continuum_level}")
    if not resolution_at_662 > 0:
        raise SignatureError("resolution_at_662 must be > 0")
    lines = sum(i * gaussian_peak(grid, e, resolution_at_662) for e, i in peaks)
    col = (1.0 - continuum_level) * lines / lines.sum()
    if continuum_level > 0:
        col = col + continuum_level * flat_shelf(grid, peaks[:, 0].max())
    return col / col.sum()


def synth_background(grid: ChannelGrid, decay_kev: float = BACKGROUND_DECAY_KEV) -> np.ndarray:
    col = np.exp(-grid.centers / decay_kev)
    return col / col.sum()


def synthetic_library(grid: ChannelGrid | None = None, nuclides: Sequence[str] = DEFAULT_NUCLIDES,
                      background: np.ndarray | None = None,
                      resolution_at_662: float = DEFAULT_RESOLUTION,
                      continuum_level: float = DEFAULT_CONTINUUM) -> SignatureLibrary:
    """Background plus one stand-in signature per nuclide in ``NUCLIDE_LINES``."""
    grid = grid or ChannelGrid()
    bkg = synth_background(grid) if background is None else np.asarray(background, dtype=float)
    cols = [bkg] + [synth_signature(grid, NUCLIDE_LINES[n], resolution_at_662, continuum_level)
                    for n in nuclides]
    return SignatureLibrary(grid, (BACKGROUND, *nuclides), np.column_stack(cols))
