"""``gamma-unmix`` command line.

Subcommands: synth-signatures, simulate, unmix, identify, score, report.
Exit codes: 0 success, 2 validation error, 3 too many non-converged fits.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, DatasetError, file_sha256, load_dataset, write_json, write_jsonl
from .identify import (
    IdentifyConfig,
    PredictionFileError,
    calibrate_threshold,
    first_step_statistic,
    greedy_identify,
    read_predictions,
    score_external_predictions,
    threshold_from_statistics,
    write_predictions,
)
from .metrics import MetricsReport, evaluate, relative_error_vs_counts, standard_bins, write_rows_csv
from .optimize import FitProblem, fit
from .parallel import run_parallel
from .signatures import ChannelGrid, SignatureError, grid_sidecar_path, load_library, save_library, synthetic_library
from .simulator import SCENARIOS, ScenarioConfig, generate_dataset
from .variability import ShiftModel, load_manifold, save_manifold, synthetic_manifold

logger = logging.getLogger("gammaunmix")

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED = 0, 2, 3
SEED_ENV = "GAMMA_UNMIX_SEED"
THICKNESS_EDGES = (0.001, 0.01, 0.1, 1.0, 5.0, 10.0, 20.0, 30.0)
SHIFT_EDGES = tuple(np.round(np.linspace(-0.10, 0.10, 11), 10))


class ValidationError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(args.seed)


def _checksums(args) -> dict:
    out = {}
    sig = getattr(args, "signatures", None)
    if sig:
        out[str(sig)] = file_sha256(sig)
        side = grid_sidecar_path(sig)
        if side.exists():
            out[str(side)] = file_sha256(side)
    mdir = getattr(args, "manifold_dir", None)
    if mdir:
        for f in sorted(Path(mdir).iterdir()):
            if f.is_file():
                out[str(f)] = file_sha256(f)
    return out


def _write_manifest(out: Path, args, argv, **extra) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": args.command, "argv": list(argv), "config": config, "tool_version": __version__,
           "library_checksums": _checksums(args)}
    doc.update(extra)
    write_json(out / "manifest.json", doc)


def _require(args, flag: str):
    value = getattr(args, flag.lstrip("-").replace("-", "_"), None)
    if not value:
        raise ValidationError(f"{flag} is required for this command")
    return value


def _load_source(args, variability: str):
    if variability == "manifold":
        return load_manifold(_require(args, "--manifold-dir"))
    lib = load_library(_require(args, "--signatures"))
    if variability == "shift":
        return ShiftModel(lib, tuple(args.alpha_range), args.amplification)
    return lib


def _check_names(data: Dataset, source) -> None:
    if tuple(data.names) != tuple(source.names):
        raise ValidationError(f"library names {list(source.names)} do not match dataset names {list(data.names)}")


def _param_edges(data: Dataset):
    scenario = data.manifest.get("config", {}).get("scenario")
    if scenario == "deformed":
        return THICKNESS_EDGES
    if scenario == "shifted":
        return SHIFT_EDGES
    return None


def _param_fields(source, variability: str, param) -> dict:
    if param is None:
        return {"param_hat": None}
    out = {"param_hat": float(param)}
    if variability == "shift":
        out["alpha_hat"] = float(param)
    elif variability == "manifold":
        out["lambda_hat"] = float(param)
        out["thickness_hat"] = float(source.physical(param))
    return out


def _nonconverged_exit(flags, limit: float) -> int:
    bad = len(flags) - int(np.sum(flags))
    if bad > limit * len(flags):
        logger.error("%d of %d fits did not converge (limit %.1f%%)", bad, len(flags), 100 * limit)
        return EXIT_NONCONVERGED
    return EXIT_OK


# -- workers (module level so they pickle) --------------------------------------

def _unmix_worker(ctx, y):
    source, variability = ctx
    res = fit(FitProblem(y, source))
    row = {"a_hat": [float(v) for v in res.a_hat], "nll": res.nll, "iterations": res.iterations,
           "converged": bool(res.converged)}
    row.update(_param_fields(source, variability, res.param_hat))
    return row


def _identify_worker(ctx, y):
    source, config = ctx
    ident = greedy_identify(y, source, config)
    row = {"labels": [int(v) for v in ident.labels], "a_hat": [float(v) for v in ident.fit.a_hat],
           "nll": ident.fit.nll, "converged": bool(ident.fit.converged), "removed": list(ident.removed),
           "steps": [{"candidate": s.name, "delta_nll": s.delta_nll, "statistic": s.statistic,
                      "accepted": s.accepted} for s in ident.steps]}
    row.update(_param_fields(source, config.variability, ident.fit.param_hat))
    return row


def _stat_worker(source, y):
    return first_step_statistic(y, source)


# -- commands ---------------------------------------------------------------------

def cmd_synth_signatures(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ChannelGrid(args.channels, args.bin_width, args.e_min)
    background = None
    if args.background:
        background = load_library(args.background).columns[:, 0]
    lib = synthetic_library(grid, background=background)
    save_library(lib, out / "library.csv")
    manifold = synthetic_manifold(grid, thicknesses=np.geomspace(0.001, 30.0, args.n_thickness),
                                  background=background)
    save_manifold(manifold, out / "manifold")
    _write_manifest(out, args, argv, library_checksum=lib.checksum())
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    seed = _seed(args)
    if args.scenario == "deformed":
        source = load_manifold(_require(args, "--manifold-dir"))
    else:
        lib = load_library(_require(args, "--signatures"))
        source = ShiftModel(lib, tuple(args.alpha_range), args.amplification) if args.scenario == "shifted" else lib
    config = ScenarioConfig(scenario=args.scenario, n_spectra=args.n, seed=seed, max_active=args.max_active,
                            split=tuple(args.split), alpha_range=tuple(args.alpha_range))
    out = Path(args.out)
    generate_dataset(config, source, out, jobs=args.jobs,
                     manifest_extra={"argv": list(argv), "library_checksums": _checksums(args)})
    return EXIT_OK


def cmd_unmix(args, argv) -> int:
    data = load_dataset(args.data).split(args.split)
    source = _load_source(args, args.variability)
    _check_names(data, source)
    rows = run_parallel(_unmix_worker, (source, args.variability), list(data.spectra), args.jobs)
    for i, row in zip(data.indices, rows):
        row["index"] = int(i)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "results.jsonl", rows)
    _write_manifest(out, args, argv, n_spectra=len(rows))
    return _nonconverged_exit([r["converged"] for r in rows], args.max_nonconverged)


def _calibration_threshold(args, source, config) -> tuple[float, int]:
    cal = load_dataset(args.threshold_calibrate)
    _check_names(cal, source)
    null = cal.select(~cal.labels.any(axis=1))
    stats = run_parallel(_stat_worker, source, list(null.spectra), args.jobs)
    return calibrate_threshold(null.spectra, source, config, statistics=stats), len(null)


def _report(data: Dataset, pred, a_hat, method: str) -> MetricsReport:
    rep = evaluate(data.labels, pred, data.nuclides, data.counts, a_hat, method=method)
    rep.binned = standard_bins(data.labels, pred, data.counts, data.nuclides, data.params, _param_edges(data))
    rep.binned["relative_error_vs_counts"] = relative_error_vs_counts(data.counts, a_hat, data.nuclides)
    return rep


def _write_report(out: Path, rep: MetricsReport) -> None:
    rep.write_json(out / "report.json")
    rep.write_bins_csv(out / "report_bins.csv")
    write_rows_csv(out / "summary.csv", [rep.summary_row()])


def cmd_identify(args, argv) -> int:
    data = load_dataset(args.data).split(args.split)
    source = _load_source(args, args.variability)
    _check_names(data, source)
    config = IdentifyConfig(expected_fpr=args.expected_fpr, lrt_threshold=args.threshold,
                            contribution_floor=args.contribution_floor, variability=args.variability)
    extra = {}
    if args.threshold_calibrate:
        thr, n_cal = _calibration_threshold(args, source, config)
        config = IdentifyConfig(expected_fpr=args.expected_fpr, lrt_threshold=thr,
                                contribution_floor=args.contribution_floor, variability=args.variability)
        extra.update(calibrated_threshold=thr, n_calibration_spectra=n_cal)
    extra["lrt_threshold"] = config.threshold

    rows = run_parallel(_identify_worker, (source, config), list(data.spectra), args.jobs)
    for i, row in zip(data.indices, rows):
        row["index"] = int(i)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = np.array([r["labels"] for r in rows], dtype=bool).reshape(len(rows), len(data.nuclides))
    a_hat = np.array([r["a_hat"] for r in rows]).reshape(len(rows), len(data.names))
    write_predictions(out / "predictions.csv", data.indices, data.nuclides, pred.astype(int))
    write_jsonl(out / "results.jsonl", rows)
    _write_report(out, _report(data, pred, a_hat, args.method))
    _write_manifest(out, args, argv, n_spectra=len(rows), **extra)
    return _nonconverged_exit([r["converged"] for r in rows], args.max_nonconverged)


def cmd_score(args, argv) -> int:
    data = load_dataset(args.data).split(args.split)
    threshold = args.threshold
    extra = {}
    if args.calibration_predictions:
        cal = load_dataset(_require(args, "--calibration-data")).split(args.calibration_split)
        idx, probs = read_predictions(args.calibration_predictions, data.nuclides)
        pos = {int(i): k for k, i in enumerate(cal.indices)}
        try:
            null = [k for k, i in enumerate(idx) if not cal.labels[pos[int(i)]].any()]
        except KeyError as exc:
            raise PredictionFileError(f"index mismatch: calibration index {exc} not in calibration data") from None
        if not null:
            raise ValidationError("no radionuclide-free spectra in the calibration predictions")
        threshold = threshold_from_statistics(probs[null].max(axis=1), args.expected_fpr)
        extra["calibrated_threshold"] = threshold
    pred = score_external_predictions(args.predictions, data.indices, data.nuclides, threshold)
    a_hat = None
    if args.weights:
        widx, z = read_predictions(args.weights, data.names)
        if widx.shape != data.indices.shape or np.any(widx != data.indices):
            raise PredictionFileError("index mismatch between weights file and dataset")
        a_hat = z * data.spectra.sum(axis=1, keepdims=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate(data.labels, pred, data.nuclides, data.counts if a_hat is not None else None, a_hat,
                   method=args.method)
    rep.binned = standard_bins(data.labels, pred, data.counts, data.nuclides, data.params, _param_edges(data))
    _write_report(out, rep)
    _write_manifest(out, args, argv, threshold=threshold, **extra)
    return EXIT_OK


def cmd_report(args, argv) -> int:
    inputs = Path(args.inputs)
    files = sorted(inputs.rglob("report.json")) if inputs.is_dir() else []
    if not files:
        raise ValidationError(f"no report.json found under {inputs}")
    import json

    reports = {}
    for f in files:
        rep = MetricsReport.from_dict(json.loads(f.read_text()))
        name = rep.method or f.parent.name
        if name in reports:
            name = f"{name}:{f.parent.name}"
        rep.method = name
        reports[name] = rep
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = [r.summary_row() for r in reports.values()]
    write_rows_csv(out / "summary.csv", summary)
    write_json(out / "summary.json", {"methods": summary})
    bins = []
    for name, rep in reports.items():
        for group, rows in rep.binned.items():
            bins.extend({"group": group, "method": name, **row} for row in rows)
    write_rows_csv(out / "bins.csv", bins)
    _write_manifest(out, args, argv, reports=[str(f) for f in files])
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_source_flags(p, variability: bool = True):
    p.add_argument("--signatures", type=Path, help="signature library CSV (with .grid.json sidecar)")
    p.add_argument("--manifold-dir", type=Path, help="tabulated manifold directory")
    if variability:
        p.add_argument("--variability", choices=("none", "manifold", "shift"), default="none")
    p.add_argument("--alpha-range", type=float, nargs=2, default=(-0.10, 0.10), metavar=("LO", "HI"))
    p.add_argument("--amplification", type=int, default=10**6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamma-unmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-signatures", help="write the stand-in signature library and steel manifold")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--background", type=Path, help="library CSV whose first column replaces the background")
    p.add_argument("--channels", type=int, default=1024)
    p.add_argument("--bin-width", type=float, default=2.0)
    p.add_argument("--e-min", type=float, default=20.0)
    p.add_argument("--n-thickness", type=int, default=96)
    p.set_defaults(func=cmd_synth_signatures)

    p = sub.add_parser("simulate", help="generate a labeled dataset")
    p.add_argument("--scenario", choices=SCENARIOS, default="known")
    _add_source_flags(p, variability=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-active", type=int, default=4)
    p.add_argument("--split", type=float, nargs=3, default=(0.64, 0.16, 0.20), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, hlp in (("unmix", cmd_unmix, "estimate counts with every signature active"),
                            ("identify", cmd_identify, "greedy identification plus metrics")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--data", type=Path, required=True)
        _add_source_flags(p)
        p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--max-nonconverged", type=float, default=0.05,
                       help="fraction of non-converged fits above which the exit code is 3")
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)
        if name == "identify":
            p.add_argument("--expected-fpr", type=float, default=0.01)
            p.add_argument("--threshold", type=float, help="fixed LRT threshold (default: chi2(1) quantile)")
            p.add_argument("--threshold-calibrate", type=Path, help="dataset whose radionuclide-free spectra "
                                                                    "calibrate the LRT threshold")
            p.add_argument("--contribution-floor", type=float, default=0.01)
            p.add_argument("--method", default="Unmixing")

    p = sub.add_parser("score", help="score an external prediction file")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--expected-fpr", type=float, default=0.01)
    p.add_argument("--calibration-predictions", type=Path)
    p.add_argument("--calibration-data", type=Path)
    p.add_argument("--calibration-split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--weights", type=Path, help="CSV 'index,<all names>' of estimated mixing weights")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--method", default="external")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="merge method reports into comparison tables")
    p.add_argument("--inputs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (ValidationError, SignatureError, DatasetError, PredictionFileError, ValueError) as exc:
        print(f"gamma-unmix {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
