"""Command-line entry point: ``runlmc <subcommand> [options]``.

Every subcommand writes its primary output (a table, TSV report or JSON
model) and then prints a one-line JSON footer to stdout with the
configuration echo, its hash, the seed and the elapsed time. Exit status is
0 on success, 1 on a usage error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from datetime import date
from pathlib import Path

import numpy as np

from . import analysis, ingest, lmc, lowrank, synth
from .baselines import METHODS, make_predictor
from .datamodel import (
    Gender,
    Parameterization,
    PerformanceTable,
    athlete_summaries,
    read_table,
    reparameterize,
    write_table,
)
from .errors import DataError
from .evaluation import ValidationSpec, compare_methods, loo_validate

THREADS_ENV = "RUNLMC_THREADS"
# options that do not change results (worker count, output locations) are left out of the config hash
_UNHASHED = {"threads", "config", "handler", "out", "json", "out_athletes", "out_events"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def config_hash(args: argparse.Namespace) -> str:
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    blob = json.dumps(echo, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _provenance(args) -> dict:
    return {"command": args.command, "seed": args.seed, "config_hash": config_hash(args)}


def _tsv_header(args) -> str:
    return f"# runlmc {args.command} seed={args.seed} config_hash={config_hash(args)}\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load(args, param: str | None = None) -> PerformanceTable:
    table = read_table(args.table)
    target = param if param is not None else getattr(args, "param", None)
    if target and Parameterization(target) is not table.parameterization:
        table = reparameterize(table, target)
    return table


def _lmc_config(args, rank: int | None = None) -> lmc.LmcConfig:
    return lmc.LmcConfig(
        rank=rank or getattr(args, "rank", 2),
        n_circuits=args.circuits,
        seed=args.seed,
        event_selection="bagged" if getattr(args, "bagged", False) else "log_closest",
    )


def _predictor(args, name: str):
    return make_predictor(name, seed=args.seed, k=args.k, lam=args.lam, lmc=_lmc_config(args, 2))


def _cleaning(args) -> ingest.CleaningConfig:
    records = ingest.RecordHistory.load(args.world_records) if args.world_records else None
    sentinels = tuple(date.fromisoformat(d) for d in args.sentinel_dates.split(",") if d)
    return ingest.CleaningConfig(
        world_records=records,
        slow_threshold_factor=args.slow_factor,
        min_age_years=args.min_age,
        sentinel_birth_date=date.fromisoformat(args.sentinel_birth),
        sentinel_attempt_dates=sentinels,
    )


def _validation_spec(args) -> ValidationSpec:
    return ValidationSpec(
        n_holdouts=args.holdouts,
        mode=args.mode,
        metric_parameterization=Parameterization(args.metric_param) if args.metric_param else None,
        seed=args.seed,
        n_boot=args.boot,
        min_row_events=args.min_events,
        min_holdout_percentile=args.min_percentile,
        threads=args.threads,
    )


def _write_attempts(attempts, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["athlete_id", "event", "date", "performance"])
    for a in attempts:
        w.writerow([a.athlete_id, a.event_label, a.date.isoformat() if a.date else "", repr(a.performance)])
    Path(path).write_text(buf.getvalue())


def _write_athletes(athletes, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["athlete_id", "gender", "birth_date"])
    for m in athletes:
        w.writerow([m.athlete_id, m.gender.value, m.birth_date.isoformat() if m.birth_date else ""])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands; each returns a dict merged into the footer


def cmd_clean(args):
    athletes = ingest.parse_athletes(args.athletes)
    attempts = ingest.parse_events(args.events)
    attempts, athletes, report = ingest.clean(attempts, athletes, _cleaning(args))
    _write_attempts(attempts, args.out_events)
    _write_athletes(athletes, args.out_athletes)
    return {"cleaning": report.to_json()}


def _collate(args, attempts, athletes):
    if args.mode == "best":
        return ingest.collate_best(attempts, athletes)
    return ingest.collate_random(attempts, athletes, seed=args.seed)


def cmd_collate(args):
    athletes = ingest.parse_athletes(args.athletes)
    attempts = ingest.parse_events(args.events)
    table = _collate(args, attempts, athletes)
    write_table(table, args.out, _provenance(args))
    return {"rows": table.n_athletes}


def cmd_ingest(args):
    table, info = ingest.load_table(
        args.athletes, args.events, mode=args.mode, seed=args.seed,
        cleaning=_cleaning(args), outliers=not args.keep_outliers,
    )
    write_table(table, args.out, {**_provenance(args), **info})
    return {"rows": table.n_athletes, "cleaning": info["cleaning"]}


def cmd_subsample(args):
    table = read_table(args.table)
    age = None
    if args.age_min is not None or args.age_max is not None:
        age = (args.age_min if args.age_min is not None else 0, args.age_max if args.age_max is not None else 200)
    spec = ingest.SubsampleSpec(
        gender=Gender.parse(args.gender) if args.gender else None,
        age_range=age,
        min_events=args.min_events,
        percentile_range=(args.pct_low, args.pct_high),
    )
    sub = ingest.subsample(table, spec)
    write_table(sub, args.out, _provenance(args))
    return {"rows": sub.n_athletes}


def cmd_predict(args):
    table = _load(args)
    col = table.catalog.index(args.event)
    if not 0 <= args.row < table.n_athletes:
        raise DataError(f"row {args.row} outside the table")
    pred = _predictor(args, args.method)
    pred.prepare(table)
    value = pred.predict(table, args.row, col)
    seconds = table.value_to_time(value, col)
    text = "row\tevent\tmethod\tprediction_seconds\n"
    text += f"{args.row}\t{table.catalog.labels[col]}\t{args.method}\t{seconds:.6f}\n"
    _emit(text, args.out)
    return {"prediction_seconds": seconds}


def cmd_impute(args):
    table = _load(args)
    filled, report = lmc.impute_all(table, _lmc_config(args), threads=args.threads)
    write_table(filled, args.out, {**_provenance(args), "impute": report.to_json()})
    return {"impute": report.to_json()}


def cmd_validate(args):
    table = _load(args)
    spec = _validation_spec(args)
    report = loo_validate(table, _predictor(args, args.method), spec)
    lines = [_tsv_header(args), "method\t" + "\t".join(sorted(report.summary)) + "\n"]
    lines.append(args.method + "\t" + "\t".join(_cell(report.summary[k]) for k in sorted(report.summary)) + "\n")
    _emit("".join(lines), args.out)
    if args.json:
        Path(args.json).write_text(json.dumps({**_provenance(args), **report.to_json()}, indent=1, sort_keys=True) + "\n")
    return {"summary": report.summary}


def _cell(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_compare(args):
    table = _load(args)
    spec = _validation_spec(args)
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    methods = {n: _predictor(args, n) for n in names}
    comp = compare_methods(table, methods, spec, reference=args.reference)
    _emit(_tsv_header(args) + comp.to_tsv(), args.out)
    if args.json:
        Path(args.json).write_text(json.dumps({**_provenance(args), **comp.to_json()}, indent=1, sort_keys=True) + "\n")
    return {"holdout_hash": comp.holdout_hash, "n_shared": int(comp.shared.sum())}


def cmd_components(args):
    table = _load(args, "log_time")
    info = {}
    if np.isnan(table.values).any():
        table, report = lmc.impute_all(table, _lmc_config(args, args.impute_rank), threads=args.threads)
        info["impute"] = report.to_json()
    model = lowrank.extract_components(table, args.rank, pure_u=args.pure_u)
    slope, intercept, r2 = lowrank.individual_exponent_diagnostic(model.components[0], model.catalog)
    doc = {**_provenance(args), **model.to_json(), "first_component_fit": {
        "slope": slope, "intercept": intercept, "r_squared": r2}, **info}
    if args.world_records:
        records = ingest.RecordHistory.load(args.world_records)
    else:
        records = ingest.RecordHistory.bundled()
    best = np.log(records.best(model.catalog))
    if not np.isnan(best).any():
        doc["world_record_residual_norms"] = {
            str(r): float(np.linalg.norm(lowrank.fit_world_records(best, model.components, r)[1]))
            for r in range(1, model.rank + 1)
        }
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    _emit(text, args.out)
    return {"r_squared_first_component": r2}


def cmd_summary(args):
    table = read_table(args.table)
    model = lowrank.ComponentModel.from_json(json.loads(Path(args.model).read_text())) if args.model else None
    labels = table.catalog.labels
    head = ["athlete_id", "n_events", "preferred_distance", "training_standard", *[f"pct_{l}" for l in labels]]
    if model is not None:
        if model.coefficients.shape[0] != table.n_athletes:
            raise DataError("model and table have different numbers of athletes")
        head += ["lambda1", "lambda2", "lambda3", "exponent"]
        exps = lowrank.exponent_of(model)
    out = [_tsv_header(args), "\t".join(head) + "\n"]
    for i, (meta, s) in enumerate(zip(table.athletes, athlete_summaries(table))):
        if s is None:
            continue
        cells = [str(meta.athlete_id), str(s.n_events), f"{s.preferred_distance:.6g}", f"{s.training_standard:.6g}"]
        cells += ["" if np.isnan(p) else f"{p:.6g}" for p in s.percentiles]
        if model is not None:
            cells += [f"{x:.6g}" for x in lowrank.three_number_summary(model, i).as_tuple()]
            cells.append(f"{exps[i]:.6g}")
        out.append("\t".join(cells) + "\n")
    _emit("".join(out), args.out)
    return {"rows": len(out) - 2}


def cmd_synth(args):
    fields = {"n_athletes": args.n, "noise_std": args.noise, "seed": args.seed}
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
        for key in ("coef_means", "coef_stds"):
            if key in data:
                data[key] = tuple(data[key])
        if "components" in data:
            data["components"] = np.array(data["components"], dtype=float)
        fields.update(data)
    spec = synth.SynthSpec(**fields)
    table = synth.generate(spec)
    if args.scheme != "none":
        table = synth.apply_missingness(table, args.scheme, args.k, spec.seed)
    write_table(table, args.out, _provenance(args))
    return {"rows": table.n_athletes, "missing": int(np.isnan(table.values).sum())}


def cmd_fair_race(args):
    table = _load(args)
    res = analysis.fair_race(table, args.a, args.b, _predictor(args, args.method), n_boot=args.boot, seed=args.seed)
    labels = table.catalog.labels
    text = _tsv_header(args) + "a\tb\tdistance\tci_low\tci_high\tshorter\tlonger\tn_crossings\n"
    text += (f"{args.a}\t{args.b}\t{res.distance:.6g}\t{res.ci_low:.6g}\t{res.ci_high:.6g}\t"
             f"{labels[res.bracket[0]]}\t{labels[res.bracket[1]]}\t{res.n_crossings}\n")
    _emit(text, args.out)
    return {"distance": res.distance}


def cmd_pivot(args):
    table = _load(args, "log_time")
    res = analysis.pivot_experiment(table, args.benchmark, config=_lmc_config(args, 2))
    _emit(_tsv_header(args) + res.to_tsv(), args.out)
    return {"triples": len(res.triples)}


def cmd_optimal(args):
    table = _load(args)
    best, pct = analysis.optimal_distance(table, args.athlete, _predictor(args, args.method))
    labels = table.catalog.labels
    text = _tsv_header(args) + "event\tpredicted_percentile\toptimal\n"
    text += "".join(f"{labels[j]}\t{pct[j]:.6g}\t{int(j == best)}\n" for j in range(len(labels)))
    _emit(text, args.out)
    return {"optimal_event": labels[best]}


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stage")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default ${THREADS_ENV} or 1); results do not depend on it")
    p.add_argument("--config", help="JSON file whose keys override the command-line options")


def _add_cleaning(p):
    p.add_argument("--world-records", help="world-record history JSON (default: bundled)")
    p.add_argument("--slow-factor", type=float, default=3.0, help="drop attempts slower than this times the event median")
    p.add_argument("--min-age", type=int, default=9, help="birth dates implying a younger age are discarded")
    p.add_argument("--sentinel-birth", default="1900-01-01")
    p.add_argument("--sentinel-dates", default="1901-01-01,2038-08-20", help="comma-separated placeholder attempt dates")


def _add_lmc(p, rank=None):
    if rank is not None:
        p.add_argument("--rank", type=int, default=rank)
    p.add_argument("--circuits", type=int, default=400, help="circuits sampled per LMC prediction")
    p.add_argument("--bagged", action="store_true", help="bag LMC over subsets of observed events")


def _add_method_opts(p):
    _add_lmc(p)
    p.add_argument("--k", type=int, default=5, help="neighbours for knn")
    p.add_argument("--lam", type=float, default=None, help="nuclear-norm regularization (default: cross-validated)")
    p.add_argument("--param", default="log_time", choices=[x.value for x in Parameterization],
                   help="parameterization the methods work in")


def _add_validation(p):
    p.add_argument("--holdouts", type=int, default=1000)
    p.add_argument("--mode", default="all_remaining", choices=["all_remaining", "causal_past"])
    p.add_argument("--boot", type=int, default=200, help="bootstrap resamples for standard errors")
    p.add_argument("--min-events", type=int, default=0, help="holdouts only from rows with this many entries")
    p.add_argument("--min-percentile", type=float, default=0.0, help="holdouts only at or above this event percentile")
    p.add_argument("--metric-param", default=None, choices=[x.value for x in Parameterization])
    p.add_argument("--json", help="write the full report (residual vectors) here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="runlmc", description="Running-performance prediction by local matrix completion.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    p = sub.add_parser("clean", help="apply cleaning rules to raw CSV files")
    p.add_argument("--athletes", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out-athletes", required=True)
    p.add_argument("--out-events", required=True)
    _add_cleaning(p)
    p.set_defaults(handler=cmd_clean)

    p = sub.add_parser("collate", help="collate (already cleaned) CSV files into a table")
    p.add_argument("--athletes", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--mode", default="best", choices=["best", "random"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_collate)

    p = sub.add_parser("ingest", help="parse, clean, collate and drop outliers")
    p.add_argument("--athletes", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--mode", default="best", choices=["best", "random"])
    p.add_argument("--keep-outliers", action="store_true")
    p.add_argument("--out", required=True)
    _add_cleaning(p)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("subsample", help="filter rows by gender, age, event count and standard")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gender", choices=["M", "F", "U"])
    p.add_argument("--age-min", type=float)
    p.add_argument("--age-max", type=float)
    p.add_argument("--min-events", type=int, default=0)
    p.add_argument("--pct-low", type=float, default=0.0)
    p.add_argument("--pct-high", type=float, default=100.0)
    p.set_defaults(handler=cmd_subsample)

    p = sub.add_parser("predict", help="predict one entry")
    p.add_argument("--table", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--event", required=True)
    p.add_argument("--out")
    _add_method_opts(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("impute", help="fill every missing entry by LMC")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", default="log_time", choices=[x.value for x in Parameterization])
    _add_lmc(p, rank=3)
    p.set_defaults(handler=cmd_impute)

    p = sub.add_parser("validate", help="leave-one-out validation of one method")
    p.add_argument("--table", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--out")
    _add_method_opts(p)
    _add_validation(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("compare", help="paired leave-one-out comparison of several methods")
    p.add_argument("--table", required=True)
    p.add_argument("--methods", required=True, help="comma-separated, e.g. mean,riegel,purdy,lmc2")
    p.add_argument("--reference", help="method the p-values refer to (default: the first)")
    p.add_argument("--out")
    _add_method_opts(p)
    _add_validation(p)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("components", help="impute (if needed) and extract the low-rank components")
    p.add_argument("--table", required=True)
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--impute-rank", type=int, default=3)
    p.add_argument("--pure-u", action="store_true", help="coefficients without singular values")
    p.add_argument("--world-records", help="world-record history JSON (default: bundled)")
    p.add_argument("--out")
    _add_lmc(p)
    p.set_defaults(handler=cmd_components)

    p = sub.add_parser("summary", help="per-athlete summary statistics")
    p.add_argument("--table", required=True)
    p.add_argument("--model", help="component model JSON for the three-number summary")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_summary)

    p = sub.add_parser("synth", help="generate a synthetic log-time table")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--scheme", default="none", choices=["none", "uniform_k", "consecutive_k"])
    p.add_argument("--k", type=int, default=6, help="entries hidden (uniform_k) or kept (consecutive_k)")
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fair-race", help="distance at which two athletes tie")
    p.add_argument("--table", required=True)
    p.add_argument("--a", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--method", default="lmc2", choices=METHODS)
    p.add_argument("--boot", type=int, default=100)
    p.add_argument("--out")
    _add_method_opts(p)
    p.set_defaults(handler=cmd_fair_race)

    p = sub.add_parser("pivot", help="rank-2 response to a perturbed time two events earlier")
    p.add_argument("--table", required=True)
    p.add_argument("--benchmark", type=float, required=True, help="marathon time in seconds")
    p.add_argument("--out")
    _add_lmc(p)
    p.set_defaults(handler=cmd_pivot)

    p = sub.add_parser("optimal", help="event with the athlete's best predicted percentile")
    p.add_argument("--table", required=True)
    p.add_argument("--athlete", type=int, required=True)
    p.add_argument("--method", default="lmc2", choices=METHODS)
    p.add_argument("--out")
    _add_method_opts(p)
    p.set_defaults(handler=cmd_optimal)

    for sp in sub.choices.values():
        _add_common(sp)
    return parser


def _apply_config(args, parser) -> None:
    if not args.config:
        return
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    known = vars(args)
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "handler"):
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, dest, value)


def run(argv: list[str] | None = None) -> int:
    start = time.perf_counter()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "runlmc: error: a subcommand is required")
        _apply_config(args, parser)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        extra = args.handler(args) or {}
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (DataError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"runlmc: data error: {msg}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"runlmc: invalid setting: {exc}", file=sys.stderr)
        return 1
    echo = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    footer = {
        "command": args.command,
        "seed": args.seed,
        "config": echo,
        "config_hash": config_hash(args),
        "elapsed_seconds": round(time.perf_counter() - start, 6),
        **extra,
    }
    print(json.dumps(footer, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
