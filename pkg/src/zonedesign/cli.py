"""Operator entry point.

Each subcommand reads the previous stage's artifacts from the output
directory, writes its own, and prints a one-line summary. Every artifact
embeds the config hash and root seed, and identical configs produce
byte-identical artifacts. Exit codes: 0 success, 1 domain error, 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analyze, engine, estimate, ingest, optimize, surrogate
from .engine import (Engine, RunConfig, artifact_path, read_json_artifact,
                     surrogate_from_dict, surrogate_to_dict, write_json_artifact)
from .geo import Design
from .hypercube import HOURS_PER_YEAR


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _load_city(cfg: RunConfig):
    return ingest.load_city(cfg.city_geojson, cfg.adjacency_csv)


def _csv_comment(cfg: RunConfig) -> str:
    return f"config_hash={cfg.config_hash()} seed={cfg.seed}"


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    records, report = ingest.ingest_calls(cfg.calls_csv, city)
    ingest.require_acceptance(report, cfg.min_accept_rate)
    clean = artifact_path(cfg.output_dir, "calls_clean.csv")
    with open(clean, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_csv_comment(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(ingest.CALLS_HEADER)
        for r in records:
            writer.writerow([r.call_time.isoformat(), r.dispatch_time.isoformat(),
                             r.arrive_time.isoformat(), r.clear_time.isoformat(),
                             r.origin_beat, r.incident_beat, r.priority])
    write_json_artifact(artifact_path(cfg.output_dir, "ingest_report.json"),
                        report.as_dict(), cfg)
    print(f"ingest: accepted {report.rows_accepted}/{report.rows_read} rows "
          f"({len(report.reasons)} reject reasons)")
    return 0


def _read_clean_calls(cfg: RunConfig, city):
    path = artifact_path(cfg.output_dir, "calls_clean.csv", must_exist=True)
    records, _ = ingest.ingest_calls(str(path), city)
    return records


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    records = _read_clean_calls(cfg, city)

    tm = estimate.estimate_travel_matrix(records, city)
    tau_path = artifact_path(cfg.output_dir, "tau.csv")
    with open(tau_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_csv_comment(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(["from_beat", "to_beat", "seconds", "n_obs", "imputed"])
        for i, a in enumerate(city.beats):
            for j, b in enumerate(city.beats):
                writer.writerow([a, b, f"{tm.tau[i, j]:.6g}", int(tm.counts[i, j]),
                                 int(tm.imputed[i, j])])

    sr = estimate.estimate_service_rate(records, include_travel=cfg.service_includes_travel)
    mu = cfg.mu_override if cfg.mu_override is not None else sr.mu_per_hour
    write_json_artifact(artifact_path(cfg.output_dir, "service_rate.json"), {
        "mu_per_hour": mu, "fitted_mu_per_hour": sr.mu_per_hour,
        "mean_minutes": sr.mean_minutes, "ks_distance": sr.ks_distance,
        "n_obs": sr.n_obs, "includes_travel": cfg.service_includes_travel,
        "mu_overridden": cfg.mu_override is not None}, cfg)

    years = sorted({r.call_time.year for r in records})
    history = estimate.yearly_rates(records, city, years)
    write_json_artifact(artifact_path(cfg.output_dir, "rates_history.json"), {
        "years": years,
        "rates": {str(y): {b: history[i, city.index(b)] for b in city.beats}
                  for i, y in enumerate(years)}}, cfg)

    cov = ingest.ingest_covariates(cfg.covariates_csv, city, years)
    model = estimate.fit_arrival_model(history, cov.values, city, p=cfg.p,
                                       kernel_theta=cfg.kernel_theta)
    write_json_artifact(artifact_path(cfg.output_dir, "arrival_model.json"), {
        "beats": list(model.beats),
        "alpha": {f"{i}->{j}": v for (i, j), v in sorted(model.alpha.items())},
        "beta0": model.beta0,
        "beta": model.beta.tolist(),
        "p": model.p,
        "kernel_theta": model.kernel_theta,
        "kernel_theta1": model.kernel_theta1,
        "log_likelihood": model.log_likelihood,
        "covariate_factors": cov.factors}, cfg)
    print(f"estimate: mu={mu:.4g}/h, tau over {int(tm.counts.sum())} dispatches, "
          f"arrival model loglik={model.log_likelihood:.2f} ({len(years)} years)")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    doc = read_json_artifact(artifact_path(cfg.output_dir, "arrival_model.json", must_exist=True))
    hist_doc = read_json_artifact(artifact_path(cfg.output_dir, "rates_history.json",
                                                must_exist=True))
    alpha = {}
    for key, v in doc["alpha"].items():
        i, j = key.split("->")
        alpha[(i, j)] = v
    model = estimate.ArrivalModel(
        beats=tuple(doc["beats"]), alpha=alpha, beta0=doc["beta0"],
        beta=np.array(doc["beta"]), p=doc["p"], kernel_theta=doc["kernel_theta"],
        kernel_theta1=doc["kernel_theta1"], sigma=doc["kernel_theta1"] ** 0.5,
        log_likelihood=doc["log_likelihood"], ols_log_likelihood=doc["log_likelihood"])

    years = hist_doc["years"]
    last_year = years[-1]
    last = np.array([hist_doc["rates"][str(last_year)][b] for b in city.beats])
    cov = ingest.ingest_covariates(cfg.covariates_csv, city, years)
    horizon = args.horizon or cfg.horizon
    fc = estimate.predict_rates(model, last, cov.values[-1], horizon)
    write_json_artifact(artifact_path(cfg.output_dir, "rates.json"), {
        "years": [last_year + 1 + h for h in range(horizon)],
        "rates": {str(last_year + 1 + h): {b: fc[h, city.index(b)] for b in city.beats}
                  for h in range(horizon)}}, cfg)
    print(f"predict: {horizon} year(s) ahead from {last_year}, "
          f"citywide rate year1={fc[0].sum():.4g}/h")
    return 0


def _load_rates(cfg: RunConfig, city, year: int | None) -> tuple[np.ndarray, int]:
    doc = read_json_artifact(artifact_path(cfg.output_dir, "rates.json", must_exist=True))
    years = doc["years"]
    chosen = year if year is not None else years[0]
    if str(chosen) not in doc["rates"]:
        raise ValueError(f"year {chosen} not in rates.json (has {years})")
    lam = np.array([doc["rates"][str(chosen)][b] for b in city.beats])
    return lam, chosen


def _load_tau(cfg: RunConfig, city) -> np.ndarray:
    path = artifact_path(cfg.output_dir, "tau.csv", must_exist=True)
    tau = np.zeros((city.n_beats, city.n_beats))
    with ingest.open_csv(str(path)) as fh:
        for row in csv.DictReader(fh):
            tau[city.index(row["from_beat"]), city.index(row["to_beat"])] = float(row["seconds"])
    return tau


def _load_mu(cfg: RunConfig) -> float:
    doc = read_json_artifact(artifact_path(cfg.output_dir, "service_rate.json", must_exist=True))
    return float(doc["mu_per_hour"])


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    design = ingest.load_design(args.design or cfg.base_design, city)
    lam, year = _load_rates(cfg, city, args.year)
    tau = _load_tau(cfg, city)
    mu = _load_mu(cfg)
    payload = {"year": year, "zones": {}}
    if args.dump_q:
        from .hypercube import export_matrix_market
        for zone in design.zones:
            zq = surrogate.zone_queue_for(city, design, zone, lam, mu, tau)
            export_matrix_market(zq, str(Path(cfg.output_dir) / f"q_{zone}.mtx"))
    workloads = surrogate.zone_workloads(city, design, lam, mu, tau)
    for zone, w in sorted(workloads.items()):
        payload["zones"][zone] = {"workload": w, "workload_hours_per_year": w * HOURS_PER_YEAR}
    payload["variance_hours"] = analyze.workload_variance(
        [v["workload_hours_per_year"] for v in payload["zones"].values()])
    write_json_artifact(artifact_path(cfg.output_dir, "workloads.json"), payload, cfg)
    print(f"simulate: year {year}, variance {payload['variance_hours']:.6g} (hrs/yr)^2")
    return 0


def cmd_approx(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    base = ingest.load_design(cfg.base_design, city)
    lam, year = _load_rates(cfg, city, args.year)
    tau = _load_tau(cfg, city)
    mu = _load_mu(cfg)
    designs = surrogate.sample_perturbed_designs(
        base, city, cfg.sample_max_shifts, cfg.sample_count, cfg.seed)
    samples = surrogate.evaluate_designs(designs, city, lam, mu, tau)
    model = surrogate.fit_linear_model(samples, base)
    doc = surrogate_to_dict(model)
    doc["year"] = year
    doc["samples"] = [{
        "assignment": s.design.assignment,
        "workloads": s.workloads,
        "shifts_from_base": s.shifts_from_base} for s in samples]
    write_json_artifact(artifact_path(cfg.output_dir, "surrogate.json"), doc, cfg)
    print(f"approx: {len(samples)} samples, R^2={model.r_squared:.4f}")
    return 0


def _load_surrogate(cfg: RunConfig):
    doc = read_json_artifact(artifact_path(cfg.output_dir, "surrogate.json", must_exist=True))
    return surrogate_from_dict(doc)


def cmd_optimize(args) -> int:
    cfg = _load_config(args)
    if args.max_shifts is not None:
        cfg.max_shifts = args.max_shifts
    city = _load_city(cfg)
    base = ingest.load_design(cfg.base_design, city)
    model = _load_surrogate(cfg)
    constraints = cfg.resolve_constraints(city, base)
    if args.exact:
        lam, _ = _load_rates(cfg, city, args.year)
        evaluator = optimize.exact_evaluator(city, lam, _load_mu(cfg), _load_tau(cfg, city))
    else:
        evaluator = optimize.surrogate_evaluator(model)
    best, f_best, trace = optimize.anneal(city, base, evaluator, constraints,
                                          cfg.annealing_config())
    ingest.save_design(best, str(artifact_path(cfg.output_dir, "design_out.csv")),
                       comment=_csv_comment(cfg))
    with open(artifact_path(cfg.output_dir, "trace.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config_hash": cfg.config_hash(), "seed": cfg.seed}) + "\n")
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    shifts = sum(1 for b in base.assignment if base.zone_of(b) != best.zone_of(b))
    print(f"optimize: objective {evaluator(base):.6g} -> {f_best:.6g} "
          f"with {shifts} beat shift(s)")
    return 0


def cmd_export_milp(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    base = ingest.load_design(cfg.base_design, city)
    model = _load_surrogate(cfg)
    constraints = cfg.resolve_constraints(city, base)
    milp = optimize.build_milp(city, model, base, constraints)
    path = artifact_path(cfg.output_dir, "milp.lp")
    optimize.export_lp(milp, str(path))
    with open(path, encoding="utf-8") as fh:
        body = fh.read()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"\\ {_csv_comment(cfg)}\n" + body)
    counts = milp.constraint_counts()
    print(f"export-milp: {len(milp.binaries)} binaries, {len(milp.continuous)} flows, "
          f"{sum(counts.values())} constraints -> {path}")
    return 0


def _build_engine(cfg: RunConfig, year: int | None = None) -> Engine:
    city = _load_city(cfg)
    base = ingest.load_design(cfg.base_design, city)
    lam, _ = _load_rates(cfg, city, year)
    return Engine(city, base, lam, _load_mu(cfg), _load_tau(cfg, city),
                  _load_surrogate(cfg), cfg.resolve_constraints(city, base))


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    eng = _build_engine(cfg, args.year)
    design = ingest.load_design(args.design or cfg.base_design, eng.city)
    response = eng.evaluate(design.assignment, exact=not args.surrogate_only)
    write_json_artifact(artifact_path(cfg.output_dir, "report.json"),
                        asdict(response), cfg)
    var = response.exact_variance_hours if response.exact_variance_hours is not None \
        else response.surrogate_variance_hours
    print(f"evaluate: variance {var:.6g} (hrs/yr)^2, "
          f"{response.shifts_from_base} shift(s) from base")
    return 0


def cmd_did(args) -> int:
    cfg = _load_config(args)
    city = _load_city(cfg)
    design = ingest.load_design(args.design or cfg.base_design, city)
    records = _read_clean_calls(cfg, city)
    years = [int(y) for y in args.years.split(",")]
    if len(years) != 3:
        raise ValueError("--years must list three consecutive periods, e.g. 2015,2016,2017")
    series = []
    for y in years:
        period = (datetime(y, 1, 1, tzinfo=timezone.utc),
                  datetime(y + 1, 1, 1, tzinfo=timezone.utc))
        series.append(analyze.daily_metric_variance(records, args.metric, period, design))
    result = analyze.did_analysis(*series)
    path = artifact_path(cfg.output_dir, "did.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_csv_comment(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(["day", "delta_before", "delta_after"])
        for p in result.points:
            writer.writerow([p.day, f"{p.delta_before:.6g}", f"{p.delta_after:.6g}"])
    print(f"did: {len(result.points)} day(s), fraction below diagonal "
          f"{result.fraction_below:.3f}")
    return 0


def cmd_serve(args) -> int:
    import os

    import uvicorn

    from .service import create_app

    cfg = _load_config(args)
    app = create_app(_build_engine(cfg, args.year), static_dir=args.static_dir)
    port = int(os.environ.get("PORT", args.port))
    print(f"serve: listening on :{port}")
    uvicorn.run(app, host="0.0.0.0", port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zonedesign",
        description="Patrol zone districting: estimate, simulate, approximate, optimize.")
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument("--output-dir", default=None, help="override config output_dir")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="parse and validate input files").set_defaults(fn=cmd_ingest)
    sub.add_parser("estimate",
                   help="fit travel matrix, service rate, arrival model").set_defaults(fn=cmd_estimate)

    p = sub.add_parser("predict", help="forecast per-beat arrival rates")
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("simulate", help="solve the queueing model for a design")
    p.add_argument("--design", default=None)
    p.add_argument("--year", type=int, default=None)
    p.add_argument("--dump-q", action="store_true",
                   help="dump per-zone transition matrices in MatrixMarket format")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("approx", help="sample perturbed designs and fit the surrogate")
    p.add_argument("--year", type=int, default=None)
    p.set_defaults(fn=cmd_approx)

    p = sub.add_parser("optimize", help="simulated-annealing districting search")
    p.add_argument("--max-shifts", type=int, default=None)
    p.add_argument("--exact", action="store_true", help="anneal on exact queue solves")
    p.add_argument("--year", type=int, default=None)
    p.set_defaults(fn=cmd_optimize)

    sub.add_parser("export-milp", help="write the MILP in CPLEX LP format").set_defaults(
        fn=cmd_export_milp)

    p = sub.add_parser("evaluate", help="full evaluation report for a design")
    p.add_argument("--design", default=None)
    p.add_argument("--year", type=int, default=None)
    p.add_argument("--surrogate-only", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("did", help="difference-in-difference of daily metric variance")
    p.add_argument("--metric", choices=["response", "waiting", "travel"], default="response")
    p.add_argument("--years", required=True, help="three consecutive years, e.g. 2015,2016,2017")
    p.add_argument("--design", default=None)
    p.set_defaults(fn=cmd_did)

    p = sub.add_parser("serve", help="run the JSON evaluation service")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--year", type=int, default=None)
    p.add_argument("--static-dir", default=None, help="UI bundle to serve at /ui")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (engine.MissingArtifactError, FileNotFoundError, ValueError,
            RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
