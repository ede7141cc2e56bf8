"""Identification and quantification scores, globally and per bin.

Spectrum-level rates:

* FPR  - fraction of spectra with at least one false positive
* FNR  - fraction of spectra with at least one missed radionuclide
* PPR  - fraction of spectra predicted exactly; FPrR = 1 - PPR

Per-radionuclide accuracy is averaged into ``accuracy``; recall is
TP / (TP + FN) and only reported for radionuclides present at least once.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_COUNT_EDGES = (200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000)
DEFAULT_NUCLIDE_COUNT_EDGES = (0, 50, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000)
ACTIVE_EDGES = (0, 1, 2, 3, 4, 5)


@dataclass
class MetricsReport:
    n_spectra: int = 0
    fpr: float | None = None
    fnr: float | None = None
    ppr: float | None = None
    fprr: float | None = None
    accuracy: float | None = None
    recall: dict[str, float] = field(default_factory=dict)
    accuracy_per_nuclide: dict[str, float] = field(default_factory=dict)
    mse_weights: float | None = None
    rae_counts: float | None = None
    binned: dict[str, list[dict]] = field(default_factory=dict)
    method: str = ""

    def summary_row(self) -> dict:
        """Table-style row in percent (MSE in units of 1e-5)."""
        pct = lambda v: None if v is None else 100.0 * v  # noqa: E731
        return {
            "method": self.method,
            "accuracy": pct(self.accuracy),
            "ppr": pct(self.ppr),
            "fprr": pct(self.fprr),
            "fpr": pct(self.fpr),
            "fnr": pct(self.fnr),
            "mse_1e-5": None if self.mse_weights is None else self.mse_weights / 1e-5,
            "rae_pct": pct(self.rae_counts),
            "n_spectra": self.n_spectra,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary_row()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_bins_csv(self, path) -> None:
        write_rows_csv(path, [dict(group=g, method=self.method, **row)
                              for g, rows in self.binned.items() for row in rows])


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    keys: list[str] = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})


def _as_labels(truth, pred):
    t = np.asarray(truth, dtype=bool)
    p = np.asarray(pred, dtype=bool)
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError(f"shape mismatch: truth {t.shape}, predictions {p.shape}")
    return t, p


def spectrum_outcomes(truth, pred):
    """Per-spectrum indicators ``(any_false_positive, any_false_negative, perfect)``."""
    t, p = _as_labels(truth, pred)
    fp = (p & ~t).any(axis=1)
    fn = (t & ~p).any(axis=1)
    return fp, fn, ~(fp | fn)


def identification_metrics(truth, pred, names: Sequence[str] | None = None) -> MetricsReport:
    """Spectrum-level FPR/FNR/PPR/FPrR plus per-radionuclide accuracy and recall."""
    t, p = _as_labels(truth, pred)
    k, n = t.shape
    names = list(names) if names is not None else [str(j) for j in range(n)]
    if len(names) != n:
        raise ValueError(f"{len(names)} names for {n} label columns")
    if k == 0:
        return MetricsReport(0)
    fp, fn, perfect = spectrum_outcomes(t, p)
    ppr = perfect.mean()
    acc_j = (t == p).mean(axis=0)
    pos = t.sum(axis=0)
    tp = (t & p).sum(axis=0)
    recall = {names[j]: float(tp[j] / pos[j]) for j in range(n) if pos[j] > 0}
    return MetricsReport(
        n_spectra=k, fpr=float(fp.mean()), fnr=float(fn.mean()), ppr=float(ppr), fprr=float(1.0 - ppr),
        accuracy=float(acc_j.mean()) if n else 1.0, recall=recall,
        accuracy_per_nuclide={names[j]: float(acc_j[j]) for j in range(n)},
    )


def mixing_weights(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    s = a.sum(axis=-1, keepdims=True)
    return np.divide(a, s, out=np.zeros_like(a), where=s > 0)


def relative_errors(a_true, a_hat, present=None) -> np.ndarray:
    """``|a_hat - a| / a`` on present radionuclides, NaN elsewhere (background column excluded)."""
    a = np.asarray(a_true, dtype=float)[:, 1:]
    ah = np.asarray(a_hat, dtype=float)[:, 1:]
    present = a > 0 if present is None else np.asarray(present, dtype=bool)
    if np.any(present & (a <= 0)):
        i, j = np.argwhere(present & (a <= 0))[0]
        raise ValueError(f"spectrum {i}: radionuclide {j + 1} labelled present with zero true counts")
    out = np.full(a.shape, np.nan)
    np.divide(np.abs(ah - a), a, out=out, where=present)
    return out


def quantification_metrics(a_true, a_hat, present=None) -> MetricsReport:
    """MSE on mixing weights (all components) and RAE on present-radionuclide counts.

    RAE averages within each spectrum first, then over the spectra having
    at least one radionuclide.
    """
    a = np.asarray(a_true, dtype=float)
    ah = np.asarray(a_hat, dtype=float)
    if a.shape != ah.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch: truth {a.shape}, estimates {ah.shape}")
    mse = float(np.mean(np.mean((mixing_weights(ah) - mixing_weights(a)) ** 2, axis=1))) if len(a) else None
    rel = relative_errors(a, ah, present)
    has = ~np.all(np.isnan(rel), axis=1)
    rae = float(np.mean(np.nanmean(rel[has], axis=1))) if has.any() else None
    return MetricsReport(n_spectra=len(a), mse_weights=mse, rae_counts=rae)


def evaluate(truth, pred, names: Sequence[str], a_true=None, a_hat=None, method: str = "") -> MetricsReport:
    rep = identification_metrics(truth, pred, names)
    if a_true is not None and a_hat is not None:
        q = quantification_metrics(a_true, a_hat, truth)
        rep.mse_weights, rep.rae_counts = q.mse_weights, q.rae_counts
    rep.method = method
    return rep


# -- binned breakdowns -------------------------------------------------------

@dataclass
class BinSpec:
    """Bins ``[edges[i], edges[i+1])`` over ``values``; the last bin is closed on the right."""

    name: str
    values: np.ndarray
    edges: Sequence[float]

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise ValueError(f"bin edges for {self.name!r} must be strictly increasing")
        self.edges = e
        self.values = np.asarray(self.values, dtype=float)

    def index(self) -> np.ndarray:
        e = self.edges
        idx = np.searchsorted(e, self.values, side="right") - 1
        idx[self.values == e[-1]] = e.size - 2
        idx[(self.values < e[0]) | (self.values > e[-1]) | np.isnan(self.values)] = -1
        return idx


def _rates(t, p) -> dict:
    fp, fn, perfect = spectrum_outcomes(t, p)
    return {"n": int(len(t)), "fpr": float(fp.mean()), "fnr": float(fn.mean()),
            "ppr": float(perfect.mean()), "fprr": float(1.0 - perfect.mean()),
            "accuracy": float((t == p).mean()) if t.shape[1] else 1.0}


def binned_report(truth, pred, specs: Sequence[BinSpec], by: BinSpec | None = None) -> dict[str, list[dict]]:
    """Spectrum-level rates per bin of each spec; empty bins are left out.

    With ``by``, every spec is further split along that second axis (e.g.
    thickness bins within counting-level bins).
    """
    t, p = _as_labels(truth, pred)
    out = {}
    outer = [(None, np.ones(len(t), dtype=bool))]
    if by is not None:
        bi = by.index()
        outer = [(b, bi == b) for b in range(by.edges.size - 1)]
    for spec in specs:
        if spec.values.shape[0] != len(t):
            raise ValueError(f"bin values for {spec.name!r} do not match the number of spectra")
        idx = spec.index()
        rows = []
        for b_out, sel_out in outer:
            for b in range(spec.edges.size - 1):
                sel = sel_out & (idx == b)
                if not sel.any():
                    continue
                row = {"bin_lo": float(spec.edges[b]), "bin_hi": float(spec.edges[b + 1])}
                if by is not None:
                    row.update({f"{by.name}_lo": float(by.edges[b_out]), f"{by.name}_hi": float(by.edges[b_out + 1])})
                row.update(_rates(t[sel], p[sel]))
                rows.append(row)
        key = spec.name if by is None else f"{spec.name}_by_{by.name}"
        out[key] = rows
    return out


def recall_vs_counts(truth, pred, nuclide_counts, names: Sequence[str],
                     edges: Sequence[float] = DEFAULT_NUCLIDE_COUNT_EDGES) -> list[dict]:
    """Recall of each radionuclide binned by its own true counts."""
    t, p = _as_labels(truth, pred)
    c = np.asarray(nuclide_counts, dtype=float)
    rows = []
    for j, name in enumerate(names):
        present = t[:, j]
        idx = BinSpec(name, c[:, j], edges).index()
        for b in range(len(edges) - 1):
            sel = present & (idx == b)
            if sel.any():
                rows.append({"nuclide": name, "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]),
                             "n": int(sel.sum()), "recall": float(p[sel, j].mean())})
    return rows


def relative_error_vs_counts(a_true, a_hat, names: Sequence[str],
                             edges: Sequence[float] = DEFAULT_NUCLIDE_COUNT_EDGES) -> list[dict]:
    """Mean and 5/90/95th percentiles of the relative count error per radionuclide and count bin."""
    rel = relative_errors(a_true, a_hat)
    c = np.asarray(a_true, dtype=float)[:, 1:]
    rows = []
    for j, name in enumerate(names):
        idx = BinSpec(name, c[:, j], edges).index()
        for b in range(len(edges) - 1):
            sel = (idx == b) & ~np.isnan(rel[:, j])
            if sel.any():
                e = rel[sel, j]
                signed = (np.asarray(a_hat, dtype=float)[sel, j + 1] - c[sel, j]) / c[sel, j]
                rows.append({"nuclide": name, "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]),
                             "n": int(sel.sum()), "mean_signed": float(signed.mean()),
                             "p5_signed": float(np.percentile(signed, 5)),
                             "p95_signed": float(np.percentile(signed, 95)),
                             "p90_abs": float(np.percentile(e, 90))})
    return rows


def standard_bins(truth, pred, a_true, names: Sequence[str], params=None, param_edges=None,
                  count_edges: Sequence[float] = DEFAULT_COUNT_EDGES) -> dict[str, list[dict]]:
    """The breakdowns plotted against total counts, number of radionuclides and scenario parameter."""
    a = np.asarray(a_true, dtype=float)
    t = np.asarray(truth, dtype=bool)
    total = BinSpec("total_counts", a.sum(axis=1), count_edges)
    n_active = BinSpec("n_active", t.sum(axis=1), ACTIVE_EDGES)
    out = binned_report(truth, pred, [total, n_active])
    out["recall_vs_counts"] = recall_vs_counts(truth, pred, a[:, 1:], names)
    if params is not None and param_edges is not None and np.any(~np.isnan(params)):
        pspec = BinSpec("param", params, param_edges)
        out.update(binned_report(truth, pred, [pspec]))
        levels = BinSpec("level", a.sum(axis=1), (count_edges[0], 1000, 10000, count_edges[-1]))
        out.update(binned_report(truth, pred, [pspec], by=levels))
    return out
