"""On-disk dataset layout.

A dataset directory holds::

    spectra.npy     int64 matrix, one row per spectrum (row i <-> index i)
    truth.jsonl     {"index", "split", "labels", "counts", "weights", "param"} per line
    manifest.json   names, config echo, seed, tool version, per-spectrum params

``labels`` run over the radionuclides (``names[1:]``); ``counts`` and
``weights`` over all components, background first.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__


class DatasetError(ValueError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, rows) -> None:
    with Path(path).open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_dataset(out_dir, records, names: Sequence[str], manifest: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = len(records[0].y) if records else 0
    spectra = np.zeros((len(records), m), dtype=np.int64)
    rows = []
    for i, r in enumerate(records):
        if r.index != i:
            raise DatasetError(f"records out of order: position {i} holds index {r.index}")
        spectra[i] = r.y
        rows.append({
            "index": int(r.index),
            "split": r.split,
            "labels": [int(v) for v in r.labels],
            "counts": [int(v) for v in r.counts],
            "weights": [float(v) for v in r.weights],
            "param": None if r.param is None else float(r.param),
        })
    np.save(out / "spectra.npy", spectra)
    write_jsonl(out / "truth.jsonl", rows)
    doc = dict(manifest)
    doc.update({
        "names": list(names),
        "n_spectra": len(records),
        "tool_version": __version__,
        "scenario_params": [row["param"] for row in rows] if any(r.param is not None for r in records) else None,
        "files": {"spectra.npy": file_sha256(out / "spectra.npy"),
                  "truth.jsonl": file_sha256(out / "truth.jsonl")},
    })
    write_json(out / "manifest.json", doc)
    return out


@dataclass
class Dataset:
    names: tuple[str, ...]
    indices: np.ndarray
    splits: np.ndarray
    spectra: np.ndarray
    counts: np.ndarray
    labels: np.ndarray
    params: np.ndarray
    manifest: dict

    @property
    def nuclides(self) -> tuple[str, ...]:
        return self.names[1:]

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    def __len__(self) -> int:
        return len(self.indices)

    def select(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.names, self.indices[mask], self.splits[mask], self.spectra[mask],
                       self.counts[mask], self.labels[mask], self.params[mask], self.manifest)

    def split(self, name: str | None) -> "Dataset":
        if name in (None, "all"):
            return self
        return self.select(self.splits == name)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        spectra = np.load(path / "spectra.npy")
        rows = read_jsonl(path / "truth.jsonl")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    names = tuple(manifest["names"])
    if len(rows) != spectra.shape[0]:
        raise DatasetError(f"{path}: {len(rows)} truth rows but {spectra.shape[0]} spectra")
    n = len(names)
    counts = np.array([r["counts"] for r in rows], dtype=float).reshape(-1, n)
    labels = np.array([r["labels"] for r in rows], dtype=bool).reshape(-1, n - 1)
    params = np.array([np.nan if r["param"] is None else r["param"] for r in rows], dtype=float)
    return Dataset(names, np.array([r["index"] for r in rows], dtype=np.int64),
                   np.array([r["split"] for r in rows], dtype=object), spectra, counts, labels, params, manifest)
