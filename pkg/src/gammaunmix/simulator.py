"""Labeled synthetic spectra for the three benchmark scenarios.

Every spectrum draws from its own generator seeded by ``(seed, index)``,
so a dataset is byte-identical whatever order or process generated it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .parallel import chunks, run_parallel
from .variability import ShiftModel, SignatureManifold

logger = logging.getLogger(__name__)

SCENARIOS = ("known", "deformed", "shifted")
SPLITS = ("train", "val", "test")
HIGH_MIN_COUNTS = ("Co-60", "Cs-137", "Eu-152")


def default_min_counts(names: Sequence[str]) -> dict[str, int]:
    return {n: (100 if n in HIGH_MIN_COUNTS else 50) for n in names}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "known"
    n_spectra: int = 1000
    total_counts_range: tuple[float, float] = (200.0, 100000.0)
    max_active: int = 4
    bkg_min_weight: float = 0.10
    min_counts: Mapping[str, int] | None = None
    split: tuple[float, float, float] = (0.64, 0.16, 0.20)
    seed: int = 0
    alpha_range: tuple[float, float] = (-0.10, 0.10)
    max_attempts: int = 1000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n_spectra < 0:
            raise ValueError("n_spectra must be >= 0")
        lo, hi = self.total_counts_range
        if not 0 < lo <= hi < math.inf:
            raise ValueError(f"invalid total_counts_range {self.total_counts_range}")
        if not 0 <= self.bkg_min_weight < 1:
            raise ValueError(f"bkg_min_weight must be in [0, 1), got {self.bkg_min_weight}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.max_active < 0:
            raise ValueError("max_active must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "total_counts_range", (float(lo), float(hi)))
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        object.__setattr__(self, "alpha_range", tuple(float(f) for f in self.alpha_range))

    def min_counts_for(self, names: Sequence[str]) -> dict[str, int]:
        out = default_min_counts(names)
        if self.min_counts:
            out.update({k: int(v) for k, v in self.min_counts.items()})
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["min_counts"] = dict(self.min_counts) if self.min_counts else None
        return d


@dataclass
class LabeledSpectrum:
    index: int
    y: np.ndarray
    counts: np.ndarray
    param: float | None = None
    split: str = "train"
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = self.counts[1:] > 0

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def spectrum_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def split_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def _draw_param(config: ScenarioConfig, source, rng):
    if config.scenario == "deformed":
        if not isinstance(source, SignatureManifold):
            raise TypeError("the deformed scenario needs a SignatureManifold source")
        return float(source.params[rng.integers(len(source.params))])
    if config.scenario == "shifted":
        if not isinstance(source, ShiftModel):
            raise TypeError("the shifted scenario needs a ShiftModel source")
        return float(rng.uniform(*config.alpha_range))
    return None


def sample_mixture(config: ScenarioConfig, rng: np.random.Generator, source):
    """Draw ground-truth counts, labels and the scenario parameter for one spectrum.

    Returns
    -------
    counts : numpy.ndarray
        Integer-valued counts, background first.
    labels : numpy.ndarray
        Boolean presence of each radionuclide.
    param : float or None
        Steel thickness (mm) for ``deformed``, shift factor for ``shifted``.
    """
    names = source.names
    nuclides = names[1:]
    floors = config.min_counts_for(nuclides)
    lo, hi = config.total_counts_range
    total = 10 ** rng.uniform(math.log10(lo), math.log10(hi))
    k = int(rng.integers(0, min(config.max_active, len(nuclides)) + 1))
    active = np.sort(rng.choice(len(nuclides), size=k, replace=False)) + 1 if k else np.array([], dtype=int)
    need = np.array([floors[names[j]] for j in active], dtype=float)
    f = config.bkg_min_weight

    counts = np.zeros(len(names))
    fewest = None
    for _ in range(max(config.max_attempts, 1)):
        z = rng.dirichlet(np.ones(k + 1))
        if z[0] < f:
            z[1:] *= (1.0 - f) / z[1:].sum()
            z[0] = f
        a_act = np.rint(z[1:] * total)
        bad = a_act < need
        if fewest is None or bad.sum() < fewest[0].sum():
            fewest = (bad, a_act, z[0])
        if not bad.any():
            break
    bad, a_act, z0 = fewest
    if bad.any():
        logger.debug("dropping %s after %d attempts", [names[j] for j in active[bad]], config.max_attempts)
        a_act = np.where(bad, 0.0, a_act)
    counts[active] = a_act
    others = a_act.sum()
    # keep the background share >= f after rounding
    floor_bkg = math.ceil(f * others / (1.0 - f)) if f > 0 else 0
    counts[0] = max(float(np.rint(z0 * total)), float(floor_bkg), 1.0)
    param = _draw_param(config, source, rng)
    return counts, counts[1:] > 0, param


def signature_matrix(source, param=None) -> np.ndarray:
    if isinstance(source, SignatureManifold):
        if param in source.params:
            return source.snapshots[source.params.index(param)].columns
        return source.matrix(float(source.latent(param)))
    if isinstance(source, ShiftModel):
        return source.matrix(0.0 if param is None else param)
    return source.columns


def sample_spectrum(source, a, rng: np.random.Generator, param=None) -> np.ndarray:
    """Poisson draw ``y ~ P(X a)`` with ``X`` taken from ``source`` at ``param``."""
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("counts must be non-negative")
    X = signature_matrix(source, param)
    if X.shape[1] != a.shape[0]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} signatures, {a.shape[0]} counts")
    return rng.poisson(X @ a).astype(np.int64)


def assign_splits(n: int, fractions: Sequence[float], seed: int) -> np.ndarray:
    """Split names for ``n`` spectra; sizes ``round(f * n)`` with the remainder in ``test``."""
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    labels = np.empty(n, dtype=object)
    perm = split_rng(seed).permutation(n)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_val]] = "val"
    labels[perm[n_train + n_val:]] = "test"
    return labels


def simulate_one(config: ScenarioConfig, source, index: int) -> LabeledSpectrum:
    rng = spectrum_rng(config.seed, index)
    counts, _, param = sample_mixture(config, rng, source)
    y = sample_spectrum(source, counts, rng, param)
    return LabeledSpectrum(index, y, counts, param)


def _simulate_chunk(context, idx):
    config, source = context
    return [simulate_one(config, source, i) for i in idx]


def simulate(config: ScenarioConfig, source, jobs: int = 1, chunk_size: int = 256) -> list[LabeledSpectrum]:
    """All records of a dataset, with split assignments, in index order."""
    parts = run_parallel(_simulate_chunk, (config, source), list(chunks(config.n_spectra, chunk_size)), jobs,
                         chunksize=1)
    records = [r for part in parts for r in part]
    for r, s in zip(records, assign_splits(config.n_spectra, config.split, config.seed)):
        r.split = s
    return records


def generate_dataset(config: ScenarioConfig, source, out_dir, jobs: int = 1, manifest_extra: dict | None = None):
    """Simulate and write a dataset directory; see :mod:`gammaunmix.dataset` for the layout."""
    from .dataset import write_dataset

    records = simulate(config, source, jobs)
    manifest = {"config": config.to_dict(), "seed": config.seed}
    if isinstance(source, SignatureManifold):
        manifest["thickness_values"] = list(source.params)
    if manifest_extra:
        manifest.update(manifest_extra)
    return write_dataset(out_dir, records, source.names, manifest)
