"""Command-line pipeline with file-based, reproducible stages.

Every subcommand reads and writes plain CSV (or flat key=value configs),
records the seed and config hash in a ``.meta`` sidecar per output, and keeps
its timestamped log line in a separate log file so outputs stay byte-stable.

Exit codes: 0 ok, 1 input error, 2 insufficient data, 3 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import os
import sys

import numpy as np

from . import dynamic as dyn
from . import filters as flt
from . import grid as grd
from . import landuse as lu
from . import metadata as md
from . import pipeline as pl
from . import synth
from .errors import InputError, PopgridError
from .regress import FIT_HEADER, fit_row
from .timebase import parse_time_of_day

ENV_SEED = "POPGRID_SEED"


def _require(path: str, what: str) -> str:
    if path is None:
        raise InputError(f"missing input: {what}")
    if not os.path.exists(path):
        raise InputError(f"missing input file: {what} at {path!r}")
    return path


def _resolve_seed(args, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        return int(env)
    return default


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _config_hash(path: str | None) -> str:
    if path is None:
        return "-"
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _finish(args, outputs: list[str], seed: int, config_path: str | None) -> int:
    digest = _config_hash(config_path)
    for path in outputs:
        with open(path + ".meta", "w", encoding="utf-8") as fh:
            fh.write(f"command = {args.command}\n")
            fh.write(f"seed = {seed}\n")
            fh.write(f"config_sha256 = {digest}\n")
    log_path = os.path.join(_out_dir(args), "popgrid.log")
    with open(log_path, "a", encoding="utf-8") as fh:
        stamp = dt.datetime.now().isoformat(timespec="seconds")
        fh.write(f"{stamp} {args.command} seed={seed} outputs={','.join(os.path.basename(p) for p in outputs)}\n")
    return 0


def _parse_window(text: str) -> tuple[int, int]:
    try:
        a, _, b = text.partition("-")
        return parse_time_of_day(a), parse_time_of_day(b)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    config = synth.load_scenario_config(_require(args.config, "--config scenario file"))
    seed = _resolve_seed(args, default=config.seed)
    scenario = synth.generate_city(config, seed=seed)
    stream, record = synth.simulate_events(scenario, days=args.days)
    out = _out_dir(args)

    paths = []

    def path(name: str) -> str:
        p = os.path.join(out, name)
        paths.append(p)
        return p

    grd.write_grid_csv(path("grid.csv"), scenario.grid)
    grd.write_admin_csv(path("admin.csv"), scenario.areas)
    lu.write_labels_csv(path("landuse.csv"), scenario.land_use)
    md.write_events_csv(path("events.csv"), stream)

    with open(path("truth_population.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "population"])
        for cid, pop in zip(scenario.grid.ids(), scenario.populations):
            writer.writerow([cid, repr(float(pop))])

    true_density = record.true_density(scenario.grid, scenario.market_share)
    with open(path("truth_density.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "slot_start_s", "density_per_km2"])
        for ci, cid in enumerate(scenario.grid.ids()):
            for si in range(record.n_slots):
                writer.writerow([cid, record.start_s + si * record.slot_s, repr(float(true_density[ci, si]))])

    write_events_meta(path("events_meta.csv"), record.attendance)
    synth.write_scenario_config(path("scenario.cfg"), scenario.config)
    return _finish(args, paths, seed, args.config)


def write_events_meta(path: str, truths) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["event_id", "date", "span_start_s", "span_end_s", "attendees", "n_devices", "venue_cells"]
        )
        for t in truths:
            writer.writerow(
                [t.event_id, t.date.isoformat(), t.span_start_s, t.span_end_s, t.attendees, t.n_devices, ";".join(t.venue_cells)]
            )


def load_events_meta(path: str) -> list[synth.AttendanceTruth]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ("event_id", "date", "span_start_s", "span_end_s", "attendees", "n_devices", "venue_cells")
        if reader.fieldnames is None or tuple(reader.fieldnames) != expected:
            raise InputError(f"{path}: expected events-meta header {','.join(expected)}")
        for row in reader:
            out.append(
                synth.AttendanceTruth(
                    event_id=row["event_id"],
                    attendees=int(row["attendees"]),
                    n_devices=int(row["n_devices"]),
                    venue_cells=tuple(row["venue_cells"].split(";")),
                    date=dt.date.fromisoformat(row["date"]),
                    span_start_s=int(row["span_start_s"]),
                    span_end_s=int(row["span_end_s"]),
                )
            )
    return out


def cmd_gridify(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    report = grd.validate_tessellation(grid)
    if not report.ok:
        raise InputError(f"invalid tessellation:\n{report}")
    areas = grd.load_admin_csv(_require(args.admin, "--admin"))
    density = grd.census_to_grid(grid, areas)
    out = _out_dir(args)
    target = os.path.join(out, "census_density.csv")
    grd.write_density_csv(target, density)
    return _finish(args, [target], _resolve_seed(args), args.config)


def cmd_presence(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    stream = md.load_events_csv(_require(args.events, "--events"))
    span = None
    if args.span_start is not None and args.span_slots is not None:
        span = (args.span_start, args.span_slots)
    if args.daily_reset:
        if span is None:
            raise InputError("--daily-reset needs --span-start/--span-slots (day aligned)")
        series = synth.operator_presence(stream, grid, args.slot, span, k=args.sanitize_k)
    else:
        series = md.infer_presence(stream, grid, args.slot, span=span)
        if args.sanitize_k > 1:
            series = synth.sanitize(series, args.sanitize_k)
    volumes = md.aggregate_volumes(stream, grid, args.slot, span=span or (int(series.slot_starts[0]), series.n_slots))
    out = _out_dir(args)
    p1 = os.path.join(out, "presence.csv")
    p2 = os.path.join(out, "volumes.csv")
    md.write_presence_csv(p1, series)
    md.write_volumes_csv(p2, volumes)
    return _finish(args, [p1, p2], _resolve_seed(args), args.config)


def cmd_filter(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    config = flt.load_filter_config(_require(args.config, "--config filter file"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    volumes = md.load_volumes_csv(_require(args.volumes, "--volumes"), grid, args.slot)
    census = grd.load_density_csv(_require(args.census, "--census"))

    from .timebase import date_of_day, day_index

    missing_by_day = {}
    for day in np.unique(day_index(presence.slot_starts)):
        date = date_of_day(int(day))
        try:
            missing_by_day[date] = md.missing_cell_fraction(presence, config.window, date)
        except InputError:
            continue  # day does not cover the window

    ranked = flt.rank_metadata_classes(volumes, presence, census, grid)
    f_presence, exclusions = pl.filtered_presence(presence, config, missing_by_day)
    f_volumes = flt.apply_time_filter(flt.apply_day_filter(volumes, config, missing_by_day)[0], config)

    out = _out_dir(args)
    paths = []
    p = os.path.join(out, "rank.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "pearson_r"])
        for name, r in ranked:
            writer.writerow([name, repr(float(r))])
    p = os.path.join(out, "exclusions.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "reasons"])
        for exc in exclusions:
            writer.writerow([exc.date.isoformat(), ";".join(exc.reasons)])
    p = os.path.join(out, "filtered_presence.csv")
    paths.append(p)
    md.write_presence_csv(p, f_presence)
    p = os.path.join(out, "filtered_volumes.csv")
    paths.append(p)
    md.write_volumes_csv(p, f_volumes)
    return _finish(args, paths, _resolve_seed(args), args.config)


def cmd_landuse(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    volumes = md.load_volumes_csv(_require(args.volumes, "--volumes"), grid, args.slot)
    signatures = [lu.weekly_signature(volumes, cid) for cid in grid.ids()]
    result = lu.cluster_signatures(signatures, args.k)
    out = _out_dir(args)
    paths = []
    p = os.path.join(out, "signatures.csv")
    paths.append(p)
    lu.write_signatures_csv(p, signatures)
    p = os.path.join(out, "clusters.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "cluster"])
        for cid in grid.ids():
            writer.writerow([cid, result.labels[cid]])
    if args.naming:
        naming: dict[int, str] = {}
        with open(_require(args.naming, "--naming"), newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != ("cluster", "land_use"):
                raise InputError(f"{args.naming}: expected header cluster,land_use")
            for row in reader:
                naming[int(row["cluster"])] = row["land_use"]
        labels = {}
        for cid in grid.ids():
            cluster = result.labels[cid]
            if cluster not in naming:
                raise InputError(f"naming file lacks cluster {cluster}")
            labels[cid] = naming[cluster]
        p = os.path.join(out, "landuse.csv")
        paths.append(p)
        lu.write_labels_csv(p, labels)
    return _finish(args, paths, _resolve_seed(args), args.config)


def _train_cells(args, grid) -> list[str] | None:
    if not args.labels:
        return None
    labels = lu.load_labels_csv(_require(args.labels, "--labels"))
    wanted = args.train_landuse
    cells = [cid for cid in grid.ids() if labels.get(cid) == wanted]
    if not cells:
        raise InputError(f"no cells labeled {wanted!r} in {args.labels}")
    return cells


def cmd_fit_static(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    census = grd.load_density_csv(_require(args.census, "--census"))
    seed = _resolve_seed(args)
    result = pl.fit_static_pipeline(
        presence,
        census,
        grid,
        window=_parse_window(args.window),
        train_cells=_train_cells(args, grid),
        seed=seed,
        n_folds=args.folds,
    )
    out = _out_dir(args)
    paths = []
    p = os.path.join(out, "fit.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIT_HEADER)
        writer.writerow(fit_row(result.fit, result.metrics))
    p = os.path.join(out, "fit_folds.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("scope",) + FIT_HEADER)
        for fold in result.folds:
            writer.writerow([f"fold{fold.fold}_train"] + fit_row(fold.fit, fold.train_metrics))
            writer.writerow([f"fold{fold.fold}_test"] + fit_row(fold.fit, fold.test_metrics))
    p = os.path.join(out, "outliers.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"])
        for cid in sorted(result.outlier_cells):
            writer.writerow([cid])
    return _finish(args, paths, seed, args.config)


def cmd_fit_dynamic(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    volumes = md.load_volumes_csv(_require(args.volumes, "--volumes"), grid, args.slot)
    census = grd.load_density_csv(_require(args.census, "--census"))
    seed = _resolve_seed(args)
    params, pairs = pl.fit_lambda_pipeline(
        presence,
        volumes,
        census,
        grid,
        kind=args.kind,
        train_cells=_train_cells(args, grid),
        overnight=_parse_window(args.overnight),
        seed=seed,
    )
    out = _out_dir(args)
    paths = []
    p = os.path.join(out, "params.cfg")
    paths.append(p)
    dyn.write_params_file(p, params)
    p = os.path.join(out, "lambda_pairs.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "alpha", "beta"])
        for lam, fit in pairs:
            writer.writerow([repr(float(lam)), repr(float(fit.alpha)), repr(float(fit.beta))])
    return _finish(args, paths, seed, args.config)


def cmd_estimate(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    volumes = md.load_volumes_csv(_require(args.volumes, "--volumes"), grid, args.slot)
    params = dyn.load_params_file(_require(args.params, "--params"))
    series = pl.dynamic_series(presence, volumes, params, literal_alpha=args.paper_eq19)
    out = _out_dir(args)
    p = os.path.join(out, "dynamic.csv")
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "slot_start_s", "rho_hat", "z"])
        for ci, cid in enumerate(series.cell_ids):
            for si, start in enumerate(series.slot_starts):
                rho = series.rho_hat[ci, si]
                if np.isfinite(rho):
                    writer.writerow([cid, int(start), repr(float(rho)), repr(float(series.z[ci, si]))])
    return _finish(args, [p], _resolve_seed(args), args.config)


def cmd_attendance(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    volumes = md.load_volumes_csv(_require(args.volumes, "--volumes"), grid, args.slot)
    params = dyn.load_params_file(_require(args.params, "--params"))
    truths = load_events_meta(_require(args.events_meta, "--events-meta"))
    estimates = [
        dyn.estimate_attendance(spec, presence, volumes, params, grid, literal_alpha=args.paper_eq19)
        for spec in pl.events_from_truth(truths, min_baseline_days=args.min_baseline_days)
    ]
    out = _out_dir(args)
    p = os.path.join(out, "attendance.csv")
    dyn.write_attendance_csv(p, estimates)
    return _finish(args, [p], _resolve_seed(args), args.config)


def cmd_baseline_xu(args) -> int:
    grid = grd.load_grid_csv(_require(args.grid, "--grid"))
    presence = md.load_presence_csv(_require(args.presence, "--presence"), grid, args.slot)
    census = grd.load_density_csv(_require(args.census, "--census"))
    labels = lu.load_labels_csv(_require(args.labels, "--labels"))
    truths = load_events_meta(_require(args.events_meta, "--events-meta"))
    seed = _resolve_seed(args)
    fits = pl.fit_per_landuse(presence, census, grid, labels, window=_parse_window(args.window), seed=seed)
    out = _out_dir(args)
    paths = []
    p = os.path.join(out, "xu_fits.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["land_use", "alpha", "beta"])
        for name in sorted(fits):
            writer.writerow([name, repr(float(fits[name].alpha)), repr(float(fits[name].beta))])
    p = os.path.join(out, "xu_attendance.csv")
    paths.append(p)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_id", "t_peak_s", "sigma_norm", "sigma_match", "lambda_tilde", "gamma_hat"])
        for spec in pl.events_from_truth(truths, min_baseline_days=args.min_baseline_days):
            gamma = pl.xu_attendance(spec, presence, fits, labels, census, grid)
            writer.writerow([spec.event_id, "", "", "", "", repr(float(gamma))])
    return _finish(args, paths, seed, args.config)


def cmd_compare(args) -> int:
    truths = load_events_meta(_require(args.truth, "--truth"))
    truth_map = {t.event_id: float(t.attendees) for t in truths}
    mv = dyn.load_attendance_csv(_require(args.multivariate, "--multivariate"))
    xu = dyn.load_attendance_csv(_require(args.xu, "--xu"))
    comparison = dyn.compare_models(truth_map, mv, xu)
    out = _out_dir(args)
    p = os.path.join(out, "compare.csv")
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_id", "rel_err_multivariate", "rel_err_xu", "abs_err_multivariate", "abs_err_xu"])
        for i, eid in enumerate(comparison.event_ids):
            writer.writerow(
                [
                    eid,
                    repr(float(comparison.relative_errors["multivariate"][i])),
                    repr(float(comparison.relative_errors["xu"][i])),
                    repr(float(comparison.absolute_errors["multivariate"][i])),
                    repr(float(comparison.absolute_errors["xu"][i])),
                ]
            )
        for model in ("multivariate", "xu"):
            for pct, value in comparison.percentiles[model].items():
                writer.writerow([f"p{pct}_{model}", repr(float(value)), "", "", ""])
        writer.writerow(["median_ratio", repr(float(comparison.median_ratio)), "", "", ""])
        writer.writerow(["p_value", repr(float(comparison.p_value)), "", "", ""])
    print(
        f"median |rel err|: multivariate={np.median(np.abs(comparison.relative_errors['multivariate'])):.4f} "
        f"xu={np.median(np.abs(comparison.relative_errors['xu'])):.4f} "
        f"ratio={comparison.median_ratio:.2f} p={comparison.p_value:.6g}"
    )
    return _finish(args, [p], _resolve_seed(args), args.config)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popgrid",
        description="population density estimation from mobile-network metadata",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", help="stage config file")
        p.add_argument("--seed", type=int, help=f"seed (falls back to ${ENV_SEED})")
        p.add_argument("--out", help="output directory", default=".")
        p.add_argument("--slot", type=int, default=900, help="slot duration in seconds")
        return p

    p = add("simulate", cmd_simulate, help="generate a synthetic scenario and its event stream")
    p.add_argument("--days", type=int, default=None)

    p = add("gridify", cmd_gridify, help="redistribute census populations onto the grid")
    p.add_argument("--grid")
    p.add_argument("--admin")

    p = add("presence", cmd_presence, help="infer presence and aggregate volumes from events")
    p.add_argument("--grid")
    p.add_argument("--events")
    p.add_argument("--sanitize-k", type=int, default=1)
    p.add_argument("--daily-reset", action="store_true", help="operator-style daily batches")
    p.add_argument("--span-start", type=int, default=None)
    p.add_argument("--span-slots", type=int, default=None)

    p = add("filter", cmd_filter, help="rank metadata classes and apply time/day filters")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--volumes")
    p.add_argument("--census")

    p = add("landuse", cmd_landuse, help="weekly signatures and signature clustering")
    p.add_argument("--grid")
    p.add_argument("--volumes")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--naming", help="cluster,land_use naming file")

    p = add("fit-static", cmd_fit_static, help="robust static fit with cross-validation")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--census")
    p.add_argument("--labels")
    p.add_argument("--train-landuse", default="residential")
    p.add_argument("--window", default="04:00-05:00")
    p.add_argument("--folds", type=int, default=3)

    p = add("fit-dynamic", cmd_fit_dynamic, help="overnight fits and the activity parameter lines")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--volumes")
    p.add_argument("--census")
    p.add_argument("--labels")
    p.add_argument("--train-landuse", default="residential")
    p.add_argument("--overnight", default="00:00-08:00")
    p.add_argument("--kind", default="call", choices=("call", "sms"))

    p = add("estimate", cmd_estimate, help="per-slot dynamic density and z-scores")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--volumes")
    p.add_argument("--params")
    p.add_argument("--paper-eq19", action="store_true", help="literal linear alpha factor")

    p = add("attendance", cmd_attendance, help="event attendance estimates")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--volumes")
    p.add_argument("--params")
    p.add_argument("--events-meta")
    p.add_argument("--min-baseline-days", type=int, default=3)
    p.add_argument("--paper-eq19", action="store_true")

    p = add("baseline-xu", cmd_baseline_xu, help="rescaled per-land-use baseline attendance")
    p.add_argument("--grid")
    p.add_argument("--presence")
    p.add_argument("--census")
    p.add_argument("--labels")
    p.add_argument("--events-meta")
    p.add_argument("--window", default="04:00-05:00")
    p.add_argument("--min-baseline-days", type=int, default=3)

    p = add("compare", cmd_compare, help="error table for the two attendance estimators")
    p.add_argument("--truth")
    p.add_argument("--multivariate")
    p.add_argument("--xu")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except PopgridError as exc:
        print(f"popgrid {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
