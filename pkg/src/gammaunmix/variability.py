"""One-parameter signature surrogates.

Two families are provided, both exposing the same ``matrix(param, columns)``
and ``evaluate(param)`` surface used by the solvers:

* :class:`SignatureManifold` interpolates tabulated libraries (e.g. signatures
  simulated behind increasing steel thickness) in a latent coordinate
  ``lam`` in ``[0, 1]``.
* :class:`ShiftModel` applies a gain shift ``e -> e * (1 - alpha)`` by
  expanding each reference signature into a high-statistics energy list and
  re-histogramming it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signatures import (
    BACKGROUND,
    DEFAULT_CONTINUUM,
    DEFAULT_NUCLIDES,
    DEFAULT_RESOLUTION,
    NUCLIDE_LINES,
    ChannelGrid,
    SignatureError,
    SignatureLibrary,
    _check_peaks,
    flat_shelf,
    gaussian_peak,
    read_signature_csv,
    synth_background,
    write_signature_csv,
)

logger = logging.getLogger(__name__)


# -- tabulated manifold ------------------------------------------------------

@dataclass(frozen=True)
class SignatureManifold:
    """Libraries tabulated at increasing parameter values, interpolated linearly in ``lam``.

    With ``log_scale`` the latent coordinate of snapshot ``k`` is
    ``(log p_k - log p_0) / (log p_last - log p_0)``; otherwise the same
    expression without logs.
    """

    snapshots: tuple[SignatureLibrary, ...]
    params: tuple[float, ...]
    log_scale: bool = True
    param_name: str = "thickness_mm"
    knots: np.ndarray = field(init=False, repr=False)
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        params = tuple(float(p) for p in self.params)
        if len(snaps) < 2:
            raise SignatureError("a manifold needs at least 2 snapshots")
        if len(params) != len(snaps):
            raise SignatureError(f"{len(snaps)} snapshots but {len(params)} parameter values")
        if np.any(np.diff(params) <= 0):
            raise SignatureError("manifold parameter values must be strictly increasing")
        if self.log_scale and params[0] <= 0:
            raise SignatureError("log-scaled manifold needs positive parameter values")
        ref = snaps[0]
        for k, s in enumerate(snaps[1:], 1):
            if s.grid != ref.grid or s.names != ref.names:
                raise SignatureError(f"snapshot {k} does not share grid/names with snapshot 0")
        coord = np.log(params) if self.log_scale else np.asarray(params)
        knots = (coord - coord[0]) / (coord[-1] - coord[0])
        knots.setflags(write=False)
        stack = np.stack([s.columns for s in snaps])
        stack.setflags(write=False)
        object.__setattr__(self, "snapshots", snaps)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_stack", stack)

    @property
    def grid(self) -> ChannelGrid:
        return self.snapshots[0].grid

    @property
    def names(self) -> tuple[str, ...]:
        return self.snapshots[0].names

    @property
    def nuclides(self) -> tuple[str, ...]:
        return self.names[1:]

    @property
    def n_components(self) -> int:
        return len(self.names)

    @property
    def param_range(self) -> tuple[float, float]:
        return self.params[0], self.params[-1]

    param_bounds = (0.0, 1.0)
    default_param = 0.5

    def latent(self, value):
        """Physical parameter -> latent ``lam``."""
        v = np.log(value) if self.log_scale else np.asarray(value, dtype=float)
        c0 = math.log(self.params[0]) if self.log_scale else self.params[0]
        c1 = math.log(self.params[-1]) if self.log_scale else self.params[-1]
        return (v - c0) / (c1 - c0)

    def physical(self, lam):
        """Latent ``lam`` -> physical parameter."""
        lam = np.asarray(lam, dtype=float)
        if self.log_scale:
            return np.exp(math.log(self.params[0]) + lam * (math.log(self.params[-1]) - math.log(self.params[0])))
        return self.params[0] + lam * (self.params[-1] - self.params[0])

    def matrix(self, lam, columns=None) -> np.ndarray:
        lam = float(lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        k = int(np.searchsorted(self.knots, lam, side="right")) - 1
        k = min(max(k, 0), len(self.knots) - 2)
        lo, hi = self.knots[k], self.knots[k + 1]
        t = (lam - lo) / (hi - lo)
        a = self._stack[k] if columns is None else self._stack[k][:, columns]
        if t == 0.0:
            x = a.copy()
        else:
            b = self._stack[k + 1] if columns is None else self._stack[k + 1][:, columns]
            x = (1.0 - t) * a + t * b
        return x / x.sum(axis=0)

    def evaluate(self, lam) -> SignatureLibrary:
        return SignatureLibrary(self.grid, self.names, self.matrix(lam))


def manifold_eval(manifold: SignatureManifold, lam: float) -> SignatureLibrary:
    """Library at latent position ``lam``."""
    return manifold.evaluate(lam)


def save_manifold(manifold: SignatureManifold, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for p, lib in zip(manifold.params, manifold.snapshots):
        name = f"{manifold.param_name}_{p!r}.csv"
        write_signature_csv(lib, directory / name)
        files.append(name)
    manifest = {
        "parameter": manifold.param_name,
        "values": list(manifold.params),
        "files": files,
        "log_scale": manifold.log_scale,
        "grid": manifold.grid.to_dict(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_manifold(directory) -> SignatureManifold:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise SignatureError(f"cannot read manifold manifest in {directory}: {exc}") from exc
    grid = ChannelGrid.from_dict(manifest["grid"])
    snaps = [read_signature_csv(directory / f, grid) for f in manifest["files"]]
    return SignatureManifold(tuple(snaps), tuple(manifest["values"]),
                             log_scale=bool(manifest.get("log_scale", True)),
                             param_name=manifest.get("parameter", "param"))


# -- stand-in deformation (steel sphere) -------------------------------------

# Iron mass attenuation coefficient (keV, cm^2/g), coarse XCOM table.
_IRON_MU = np.array([
    (20, 25.7), (30, 8.18), (40, 3.63), (50, 1.96), (60, 1.21), (80, 0.596),
    (100, 0.372), (150, 0.196), (200, 0.146), (300, 0.110), (400, 0.094),
    (500, 0.084), (600, 0.077), (800, 0.067), (1000, 0.060), (1250, 0.053),
    (1500, 0.049), (2000, 0.043), (3000, 0.036),
])
_IRON_DENSITY = 7.874


def steel_attenuation(energy, thickness_mm: float) -> np.ndarray:
    """Narrow-beam transmission through ``thickness_mm`` of iron."""
    e = np.clip(np.asarray(energy, dtype=float), _IRON_MU[0, 0], _IRON_MU[-1, 0])
    mu = np.exp(np.interp(np.log(e), np.log(_IRON_MU[:, 0]), np.log(_IRON_MU[:, 1])))
    return np.exp(-mu * _IRON_DENSITY * thickness_mm / 10.0)


def deformed_signature(grid: ChannelGrid, peaks, thickness_mm: float,
                       resolution_at_662: float = DEFAULT_RESOLUTION,
                       continuum_level: float = DEFAULT_CONTINUUM,
                       scatter_fraction: float = 0.5) -> np.ndarray:
    """Stand-in signature of a source inside a steel shell.

    Peaks are attenuated, a fixed fraction of the removed photons is
    returned as down-scattered shelf, and the shelf itself is softened by
    the low-energy attenuation.
    """
    peaks = _check_peaks(grid, peaks)
    trans = steel_attenuation(peaks[:, 0], thickness_mm)
    w = peaks[:, 1] / peaks[:, 1].sum()
    lines = sum(wi * ti * gaussian_peak(grid, e, resolution_at_662)
                for (e, _), wi, ti in zip(peaks, w, trans))
    lost = 1.0 - float(np.dot(w, trans))
    shelf = flat_shelf(grid, peaks[:, 0].max()) * np.sqrt(steel_attenuation(grid.centers, thickness_mm))
    if shelf.sum() > 0:
        shelf = shelf / shelf.sum()
    col = (1.0 - continuum_level) * lines + (continuum_level + scatter_fraction * lost) * shelf
    return col / col.sum()


def synthetic_manifold(grid: ChannelGrid | None = None,
                       nuclides: Sequence[str] = tuple(n for n in DEFAULT_NUCLIDES if n != "I-131"),
                       thicknesses: Sequence[float] | None = None,
                       background: np.ndarray | None = None) -> SignatureManifold:
    """Steel-shell manifold over 96 log-spaced thicknesses (0.001 to 30 mm), background fixed."""
    grid = grid or ChannelGrid()
    if thicknesses is None:
        thicknesses = np.geomspace(0.001, 30.0, 96)
    bkg = synth_background(grid) if background is None else np.asarray(background, dtype=float)
    snaps = []
    for t in thicknesses:
        cols = [bkg] + [deformed_signature(grid, NUCLIDE_LINES[n], t) for n in nuclides]
        snaps.append(SignatureLibrary(grid, (BACKGROUND, *nuclides), np.column_stack(cols)))
    return SignatureManifold(tuple(snaps), tuple(float(t) for t in thicknesses))


# -- gain shift ----------------------------------------------------------------

def scaled_counts(column, amplification: int) -> np.ndarray:
    """Per-channel event counts, ``column * amplification`` rounded to integers.

    Every count is the floor or the ceiling of its exact value; the channels
    with the largest fractional parts take the ceiling so that the counts
    sum to ``amplification`` exactly (largest-remainder rounding).  Works
    column-wise on 2-D input.
    """
    col = np.asarray(column, dtype=float)
    if col.ndim == 2:
        return np.column_stack([scaled_counts(c, amplification) for c in col.T])
    raw = col / col.sum() * amplification
    counts = np.floor(raw).astype(np.int64)
    frac = raw - counts
    deficit = int(amplification - counts.sum())
    if deficit > 0:
        order = np.argsort(-frac, kind="stable")
        counts[order[:deficit]] += 1
    elif deficit < 0:
        order = np.argsort(np.where(counts > 0, frac, np.inf), kind="stable")
        counts[order[:-deficit]] -= 1
    return counts


def energy_list_from_signature(column, grid: ChannelGrid, amplification: int = 10**6) -> np.ndarray:
    """Expand a normalized signature into an artificial list of deposited energies.

    Channel ``i`` holding ``s`` events (see :func:`scaled_counts`)
    contributes ``s`` energies ``lo, lo + d, ..., lo + (s - 1) d`` with
    ``lo`` the channel's lower edge and ``d = bin_width / s``.
    """
    if int(amplification) != amplification or amplification < 1:
        raise ValueError(f"amplification must be a positive integer, got {amplification}")
    col = np.asarray(column, dtype=float)
    if col.shape != (grid.n_channels,):
        raise SignatureError(f"column has {col.shape} entries, grid has {grid.n_channels} channels")
    counts = scaled_counts(col, amplification)
    nz = np.flatnonzero(counts > 0)
    s = counts[nz]
    chan = np.repeat(nz, s)
    # position of each event within its own channel
    start = np.repeat(np.cumsum(s) - s, s)
    k = np.arange(chan.size) - start
    lo = grid.e_min + chan * grid.bin_width
    return lo + k * (grid.bin_width / np.repeat(s, s))


def histogram_energies(energies, grid: ChannelGrid) -> tuple[np.ndarray, int]:
    """Integer histogram on ``grid`` plus the number of energies that fell outside it."""
    idx = np.floor((np.asarray(energies, dtype=float) - grid.e_min) / grid.bin_width).astype(np.int64)
    inside = (idx >= 0) & (idx < grid.n_channels)
    hist = np.bincount(idx[inside], minlength=grid.n_channels)
    return hist, int(idx.size - inside.sum())


def shifted_counts(counts: np.ndarray, grid: ChannelGrid, alpha: float) -> tuple[np.ndarray, int]:
    """Histogram of the energy list of ``counts`` after ``e -> e * (1 - alpha)``.

    Bit-identical to histogramming the materialized list, but for every
    source channel it only locates the first event index landing in each
    target bin: an analytic estimate, then a correction against the exact
    floating-point binning of the list (which is monotone in the index).
    """
    scale = 1.0 - alpha
    w, e0, m = grid.bin_width, grid.e_min, grid.n_channels
    nz = np.flatnonzero(counts > 0)
    s = counts[nz]
    lo = e0 + nz * w
    d = w / s

    def bin_of(k):
        return np.floor(((lo + k * d) * scale - e0) / w)

    def first_at_or_above(b):
        # smallest event index whose shifted energy falls in bin >= b
        k = np.clip(np.ceil((e0 + b * w - lo * scale) / (d * scale)), 0, s)
        for _ in range(4):
            down = (k > 0) & (bin_of(np.maximum(k - 1, 0)) >= b)
            up = (k < s) & (bin_of(np.minimum(k, s - 1)) < b)
            if not (down.any() or up.any()):
                break
            k = k - down + up
        return k

    first = bin_of(0).astype(np.int64)
    last = bin_of(s - 1).astype(np.int64)
    hist = np.zeros(m, dtype=np.int64)
    prev = np.zeros(s.size)
    for off in range(1, int((last - first).max(initial=0)) + 2):
        nxt = first_at_or_above(first + off)
        cnt = (nxt - prev).astype(np.int64)
        b = first + off - 1
        ok = (b >= 0) & (b < m) & (cnt > 0)
        np.add.at(hist, b[ok], cnt[ok])
        prev = nxt
    dropped = int(counts.sum() - hist.sum())
    return hist, dropped


@dataclass(frozen=True)
class ShiftModel:
    """Gain-shifted versions ``g(alpha)`` of a reference library.

    The background column is left unshifted unless ``shift_background`` is
    set, matching a known, separately measured background.
    """

    reference: SignatureLibrary
    alpha_range: tuple[float, float] = (-0.10, 0.10)
    amplification: int = 10**6
    shift_background: bool = False
    _counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.alpha_range)
        if not lo <= hi:
            raise ValueError(f"invalid alpha_range {self.alpha_range}")
        if not 1.0 - hi > 0:
            raise ValueError("alpha_range must keep 1 - alpha > 0")
        if int(self.amplification) != self.amplification or self.amplification < 10**3:
            raise ValueError(f"amplification must be an integer >= 1000, got {self.amplification}")
        object.__setattr__(self, "alpha_range", (lo, hi))
        counts = scaled_counts(self.reference.columns, self.amplification)
        counts.setflags(write=False)
        object.__setattr__(self, "_counts", counts)

    @property
    def grid(self) -> ChannelGrid:
        return self.reference.grid

    @property
    def names(self) -> tuple[str, ...]:
        return self.reference.names

    @property
    def nuclides(self) -> tuple[str, ...]:
        return self.reference.nuclides

    @property
    def n_components(self) -> int:
        return self.reference.n_components

    @property
    def param_bounds(self) -> tuple[float, float]:
        return self.alpha_range

    default_param = 0.0

    def _check_alpha(self, alpha: float) -> float:
        alpha = float(alpha)
        lo, hi = self.alpha_range
        if not lo <= alpha <= hi:
            raise ValueError(f"alpha {alpha} outside range [{lo}, {hi}]")
        return alpha

    def column_counts(self, j: int, alpha: float) -> tuple[np.ndarray, int]:
        return shifted_counts(self._counts[:, j], self.grid, self._check_alpha(alpha))

    def shifted_column(self, j: int, alpha: float) -> np.ndarray:
        if j == 0 and not self.shift_background:
            return self.reference.columns[:, 0].copy()
        hist, _ = self.column_counts(j, alpha)
        total = hist.sum()
        if total == 0:
            raise SignatureError(
                f"renormalization error: column {j} ({self.names[j]}) shifted entirely outside the grid "
                f"at alpha={alpha}")
        return hist / total

    def matrix(self, alpha, columns=None) -> np.ndarray:
        cols = range(self.n_components) if columns is None else columns
        return np.column_stack([self.shifted_column(int(j), alpha) for j in cols])

    def evaluate(self, alpha) -> SignatureLibrary:
        return SignatureLibrary(self.grid, self.names, self.matrix(alpha))


def shift_signature(model: ShiftModel, column_index: int, alpha: float) -> np.ndarray:
    """Normalized signature of column ``column_index`` under gain shift ``alpha``."""
    return model.shifted_column(column_index, alpha)


def shift_signature_by_list(column, grid: ChannelGrid, alpha: float, amplification: int = 10**6) -> np.ndarray:
    """Literal energy-list route: expand, scale every energy, histogram, renormalize."""
    energies = energy_list_from_signature(column, grid, amplification) * (1.0 - alpha)
    hist, _ = histogram_energies(energies, grid)
    if hist.sum() == 0:
        raise SignatureError(f"renormalization error: all energies shifted outside the grid at alpha={alpha}")
    return hist / hist.sum()
