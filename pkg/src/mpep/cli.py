"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 convergence gate failed
(outputs are still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli

from . import __version__
from .config import BiasSpec, ConfigError, ModelConfig, load_config
from .data import DatasetError, StrataDataset, load_dataset, save_dataset
from .diagnostics import DiagnosticsError, consistency_pvalue, consistency_text
from .episodes import EpisodeError, code_treatment_episodes
from .fitting import Fit, fit_model
from .likelihood import LikelihoodError, ParameterVector
from .sampler import SamplerConfig, SamplerError
from .selection import stepwise_select
from .summary import stratum_labels, summarize_array, yearly_series
from .synthetic import SimulationError, generate_synthetic, reference_truth

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("mpep")


class InputError(ValueError):
    pass


# -- helpers ---------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path: Path, rows: list[dict], fields: Optional[list[str]] = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


class Manifest:
    """Run manifest: inputs, seed, sampler settings, gate results, warnings."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.data = OrderedDict(
            command=command, version=__version__, seed=args.seed,
            sampler={"chains": args.chains, "warmup": args.warmup,
                     "samples": args.samples},
            inputs={}, fits={}, outputs={}, warnings=[], exit_code=None,
            started=dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"))

    def add_input(self, label, path):
        self.data["inputs"][label] = {"path": str(path), "sha256": _sha256(path)}

    def add_fit(self, label: str, fit: Fit):
        self.data["fits"][label] = {
            "config_sha256": fit.config.digest(),
            "dataset_sha256": fit.dataset.digest(),
            "gate": fit.gate.to_dict() | {"failing": fit.gate.failing[:20]},
            "warnings": fit.warning_counts(),
            "step_size": fit.draws.step_size,
            "seconds": round(fit.seconds, 2),
        }
        self.data["warnings"] += [f"{label}: {w}" for w in fit.warnings]

    @staticmethod
    def snapshot(out: Path) -> dict:
        if not out.is_dir():
            return {}
        return {p.name: p.stat().st_mtime_ns for p in out.iterdir() if p.is_file()}

    def write(self, out: Path, code: int, before: dict, name: str = "manifest.json"):
        """Record files created or rewritten since ``before`` was taken."""
        self.data["exit_code"] = code
        self.data["finished"] = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        for p in sorted(out.iterdir()):
            if (p.is_file() and p.name != name
                    and before.get(p.name) != p.stat().st_mtime_ns):
                self.data["outputs"][p.name] = _sha256(p)
        _write_json(out / name, self.data)


def _sampler(args, **kw) -> SamplerConfig:
    return SamplerConfig(chains=args.chains, warmup=args.warmup, samples=args.samples,
                         seed=args.seed, **kw)


def _load_inputs(args, manifest) -> tuple[StrataDataset, ModelConfig]:
    config = load_config(args.config)
    dataset = load_dataset(args.data)
    manifest.add_input("data", args.data)
    manifest.add_input("config", args.config)
    missing = set(config.events) - set(dataset.events)
    if missing:
        raise InputError(f"config names events missing from the data: {sorted(missing)}")
    return dataset, config


def _fit(label, config, dataset, args, manifest) -> Fit:
    log.info("fitting %s", label)
    fit = fit_model(config, dataset, _sampler(args))
    manifest.add_fit(label, fit)
    return fit


def _stratum_rows(fit: Fit) -> list[dict]:
    from .summary import derived_draws
    rows = []
    der = derived_draws(fit.draws, fit.model, ["prev", "prev_e", "N"])
    labels = stratum_labels(fit.dataset)
    for lab, key in zip(labels, fit.dataset.keys()):
        row = dict(zip(("sex", "age_group", "year", "region"), fit.dataset.labels(key)))
        for tag in ("Prev", "Prev_e", "N"):
            s = summarize_array(tag, der[f"{tag}[{lab}]"], diagnostics=False)
            row |= {f"{tag}_mean": s.mean, f"{tag}_lower": s.lower, f"{tag}_upper": s.upper}
        rows.append(row)
    return rows


def _write_fit(fit: Fit, out: Path, prefix: str = "") -> None:
    fit.draws.to_csv(out / f"{prefix}draws.csv")
    fit.summary().to_csv(out / f"{prefix}summary.csv")
    _write_csv(out / f"{prefix}prevalence_strata.csv", _stratum_rows(fit))
    _write_csv(out / f"{prefix}prevalence_yearly.csv",
               yearly_series(fit.draws, fit.model, prefix.rstrip("_") or "model"))
    dev = fit.deviance
    dev.to_json(out / f"{prefix}deviance.json")
    (out / f"{prefix}deviance.txt").write_text(dev.to_text() + "\n")


# -- commands --------------------------------------------------------------

def cmd_fit(args, out: Path, manifest: Manifest) -> int:
    dataset, config = _load_inputs(args, manifest)
    if len(config.events) == 1:
        msg = ("single event type: internal consistency between sources cannot be "
               "checked")
        log.warning(msg)
        manifest.data["warnings"].append(msg)
    fit = _fit("model", config, dataset, args, manifest)
    _write_fit(fit, out)
    print(fit.summary().to_text(kinds=["yearly", "constrained"]))
    print()
    print(fit.deviance.to_text())
    return EXIT_OK if fit.converged else EXIT_CONVERGENCE


def cmd_compare(args, out: Path, manifest: Manifest) -> int:
    dataset = load_dataset(args.data)
    manifest.add_input("data", args.data)
    entries = []
    for i, path in enumerate(args.config):
        cfg = load_config(path)
        manifest.add_input(f"config{i}", path)
        if args.families:
            entries += [(f"{Path(path).stem}:{fam}", cfg.with_families(fam))
                        for fam in args.families]
        else:
            entries.append((f"{i}:{Path(path).stem}", cfg))
    rows = []
    code = EXIT_OK
    for label, cfg in entries:
        fit = _fit(label, cfg, dataset, args, manifest)
        dev = fit.deviance
        row = {"model": label, "family": "/".join(sorted({cfg.family(s) for s in cfg.submodels})),
               "DIC": dev.dic, "ResDev": dev.resdev, "pD": dev.pd,
               "converged": fit.converged}
        for s in dev.submodels:
            row[f"DIC[{s.submodel}]"] = s.dic
        from .summary import constrained_draws
        for name, x in constrained_draws(fit.draws, fit.model).items():
            if name.endswith((".theta", ".pi")):
                row[f"mean[{name}]"] = float(np.mean(x))
        rows.append(row)
        if not fit.converged:
            code = EXIT_CONVERGENCE
    fields = list(dict.fromkeys(k for r in rows for k in r))
    _write_csv(out / "compare.csv", rows, fields)
    w = max(len(r["model"]) for r in rows)
    print(f"{'model':<{w}}  {'DIC':>10} {'ResDev':>10} {'pD':>8}  converged")
    for r in rows:
        print(f"{r['model']:<{w}}  {r['DIC']:>10.1f} {r['ResDev']:>10.1f} "
              f"{r['pD']:>8.1f}  {r['converged']}")
    return code


def _parse_where(items: Sequence[str]) -> dict:
    where = {}
    for item in items or []:
        factor, sep, levels = item.partition("=")
        if not sep or not levels:
            raise InputError(f"--bias-where expects factor=level[,level], got {item!r}")
        where[factor.strip()] = tuple(v.strip() for v in levels.split(","))
    return where


def cmd_consistency(args, out: Path, manifest: Manifest) -> int:
    dataset, config = _load_inputs(args, manifest)
    if len(config.events) != 2:
        raise InputError(f"consistency analysis needs exactly 2 event types, "
                         f"config has {len(config.events)}")
    a, b = config.events
    fits = OrderedDict()
    fits[f"{a}_only"] = _fit(f"{a}_only", config.only_events([a]), dataset, args, manifest)
    fits[f"{b}_only"] = _fit(f"{b}_only", config.only_events([b]), dataset, args, manifest)
    fits["joint"] = _fit("joint", config, dataset, args, manifest)
    if args.bias:
        event = args.bias_event or b
        if event not in config.events:
            raise InputError(f"--bias-event {event!r} is not a configured event")
        biased = config.with_bias(BiasSpec(event, _parse_where(args.bias_where),
                                           shared=args.bias_shared))
        fits["joint_bias"] = _fit("joint_bias", biased, dataset, args, manifest)

    res = consistency_pvalue(fits[f"{a}_only"], fits[f"{b}_only"], unit=args.unit,
                             seed=args.seed)
    series = []
    for label, fit in fits.items():
        series += yearly_series(fit.draws, fit.model, label)
    _write_csv(out / "series.csv", series)
    pvals = {u.unit: u for u in res.units}
    table = []
    for row in series:
        if row["quantity"] != "Prev_year":
            continue
        u = pvals.get(row["year"]) if args.unit == "year" else None
        table.append({"year": row["year"], "source": row["source"],
                      "prevalence_pct": 100 * row["estimate"],
                      "lower_pct": 100 * row["lower"], "upper_pct": 100 * row["upper"],
                      "p_value": u.p_value if u else ""})
    _write_csv(out / "consistency_table.csv", table)
    _write_csv(out / "consistency.csv", [vars(u) for u in res.units])
    for label, fit in fits.items():
        fit.draws.to_csv(out / f"{label}_draws.csv")
        fit.deviance.to_json(out / f"{label}_deviance.json")
    print(consistency_text(res))
    ok = all(f.converged for f in fits.values())
    return EXIT_OK if ok else EXIT_CONVERGENCE


def cmd_select(args, out: Path, manifest: Manifest) -> int:
    dataset, config = _load_inputs(args, manifest)
    manifest.add_input("candidates", args.candidates)
    with open(args.candidates, "rb") as fh:
        try:
            spec = tomli.load(fh)
        except tomli.TOMLDecodeError as err:
            raise InputError(f"{args.candidates}: {err}") from None
    cands = spec.get("candidate", [])
    result = stepwise_select(config, cands, dataset, _sampler(args),
                             threshold=args.threshold)
    (out / "selected.toml").write_text(result.config.to_toml())
    result.to_json(out / "selection_trace.json")
    for r in result.trace:
        change = "" if r.change is None else f"{r.change:+.1f}"
        print(f"{r.candidate:<40} {change:>8}  {'kept' if r.retained else 'dropped'}"
              f"{'  ' + r.note if r.note else ''}")
    return EXIT_OK


def _simulate_target(args) -> tuple[Path, Path]:
    """(output directory, data file): ``--out`` may name a CSV file."""
    if args.out.suffix.lower() == ".csv":
        return args.out.parent, args.out
    return args.out, args.out / "data.csv"


def cmd_simulate(args, out: Path, manifest: Manifest) -> int:
    path = args.config_opt or args.config
    if path is None:
        raise InputError("simulate needs a model configuration (--config)")
    config = load_config(path)
    manifest.add_input("config", path)
    try:
        shape = tuple(int(s) for s in args.shape.split(","))
    except ValueError:
        raise InputError(f"--shape expects four integers, got {args.shape!r}") from None
    if args.truth:
        manifest.add_input("truth", args.truth)
        try:
            truth = json.loads(Path(args.truth).read_text())
        except json.JSONDecodeError as err:
            raise InputError(f"{args.truth}: {err}") from None
    else:
        truth = reference_truth(config, shape, args.population, seed=args.seed)
    inflate = {}
    for item in args.inflate or []:
        event, _, factor = item.partition("=")
        try:
            inflate[event] = float(factor)
        except ValueError:
            raise InputError(f"--inflate expects event=factor, got {item!r}") from None
    if not isinstance(truth, (ParameterVector, dict)):
        raise InputError("--truth must hold a JSON object of parameter values")
    try:
        ds = generate_synthetic(truth, config, shape, seed=args.seed,
                                population=args.population, extra_multiplier=inflate)
    except KeyError as err:
        raise InputError(f"truth: {err.args[0]}") from None
    _, data_path = _simulate_target(args)
    save_dataset(ds, data_path)
    values = truth.as_dict() if isinstance(truth, ParameterVector) else truth
    _write_json(data_path.with_name(data_path.stem + ".truth.json")
                if data_path.name != "data.csv" else out / "truth.json", values)
    print(f"wrote {ds.n_strata} strata to {data_path}")
    return EXIT_OK


def _parse_day(text: str, row: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(text).toordinal()
    except ValueError:
        raise InputError(f"row {row}: malformed date {text!r}") from None


def cmd_episodes(args, out: Path, manifest: Manifest) -> int:
    manifest.add_input("reimbursements", args.reimbursements)
    start = _parse_day(args.followup_start, 0)
    end = _parse_day(args.followup_end, 0)
    people: dict[str, list[int]] = OrderedDict()
    rejected = []
    with open(args.reimbursements, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        if not {"person_id", "date"} <= cols:
            raise InputError("reimbursement file needs columns person_id,date")
        for i, rec in enumerate(reader, start=2):
            pid = (rec["person_id"] or "").strip()
            if not pid:
                raise InputError(f"row {i}: missing person_id")
            days = people.setdefault(pid, [])
            if (rec["date"] or "").strip():
                days.append(_parse_day(rec["date"], i))
    ep_rows, pt_rows = [], []
    for pid, days in people.items():
        if not days:
            rejected.append({"person_id": pid, "reason": "no reimbursement dates"})
            continue
        try:
            coding = code_treatment_episodes(sorted(set(days)), end, start)
        except EpisodeError as err:
            rejected.append({"person_id": pid, "reason": str(err)})
            continue
        for k, ep in enumerate(coding.episodes):
            ep_rows.append({"person_id": pid, "episode": k, "start": ep.start,
                            "end": ep.end, "days": ep.days})
        pt_rows.append({"person_id": pid, "t_on_days": coding.t_on,
                        "t_off_days": coding.t_off,
                        "t_on_years": coding.t_on / 365.25,
                        "t_off_years": coding.t_off / 365.25})
    _write_csv(out / "episodes.csv", ep_rows, ["person_id", "episode", "start", "end", "days"])
    _write_csv(out / "person_time.csv", pt_rows,
               ["person_id", "t_on_days", "t_off_days", "t_on_years", "t_off_years"])
    _write_csv(out / "rejected.csv", rejected, ["person_id", "reason"])
    for r in rejected:
        log.warning("person %s rejected: %s", r["person_id"], r["reason"])
        manifest.data["warnings"].append(f"person {r['person_id']}: {r['reason']}")
    print(f"{len(pt_rows)} people coded, {len(rejected)} rejected")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "compare": cmd_compare, "consistency": cmd_consistency,
            "select": cmd_select, "simulate": cmd_simulate, "episodes": cmd_episodes}


def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=0)
    glob.add_argument("--chains", type=int, default=4)
    glob.add_argument("--warmup", type=int, default=1000)
    glob.add_argument("--samples", type=int, default=1000)
    glob.add_argument("--out", type=Path, default=Path("mpep_out"),
                      help="output directory, created if needed; simulate also "
                           "accepts a .csv file name")
    glob.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mpep", parents=[glob],
                                description="Bayesian estimation of hidden population "
                                            "size from linked and unlinked event counts.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[glob], help="fit one model")
    s.add_argument("data")
    s.add_argument("config")

    s = sub.add_parser("compare", parents=[glob], help="compare models by DIC")
    s.add_argument("data")
    s.add_argument("config", nargs="+")
    s.add_argument("--families", type=lambda t: t.split(","), default=None,
                   help="refit each config under these families, e.g. poisson,zip,nb,zinb")

    s = sub.add_parser("consistency", parents=[glob],
                       help="compare single-source and joint estimates")
    s.add_argument("data")
    s.add_argument("config")
    s.add_argument("--unit", default="year",
                   choices=["year", "sex", "age_group", "region", "stratum", "total"])
    s.add_argument("--bias", action="store_true", help="also fit with a bias term")
    s.add_argument("--bias-event", default=None,
                   help="event whose extra counts get the bias term (default: second)")
    s.add_argument("--bias-where", action="append", default=[],
                   help="restrict the bias term, e.g. year=2019,2020 (repeatable)")
    s.add_argument("--bias-shared", action="store_true",
                   help="one bias coefficient for all flagged strata")

    s = sub.add_parser("select", parents=[glob], help="stepwise term selection")
    s.add_argument("data")
    s.add_argument("config")
    s.add_argument("candidates", help="TOML file with [[candidate]] tables")
    s.add_argument("--threshold", type=float, default=3.0)

    s = sub.add_parser("simulate", parents=[glob], help="draw a synthetic dataset")
    s.add_argument("config", nargs="?", default=None)
    s.add_argument("--config", dest="config_opt", default=None,
                   help="model configuration (alternative to the positional argument)")
    s.add_argument("--shape", default="2,3,3,2", help="sex,age,year,region level counts")
    s.add_argument("--population", type=float, default=100_000.0)
    s.add_argument("--truth", default=None, help="JSON of parameter values")
    s.add_argument("--inflate", action="append", default=[],
                   help="scale an event's extra counts, e.g. hospitalisations=2")

    s = sub.add_parser("episodes", parents=[glob], help="code treatment episodes")
    s.add_argument("reimbursements", help="CSV with person_id,date")
    s.add_argument("--followup-start", required=True, help="day number or ISO date")
    s.add_argument("--followup-end", required=True, help="day number or ISO date")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    manifest_name = "manifest.json"
    if args.command == "simulate":
        out, data_path = _simulate_target(args)
        if data_path.name != "data.csv":
            manifest_name = data_path.stem + ".manifest.json"
    manifest = Manifest(args.command, args)
    before = Manifest.snapshot(out)
    try:
        try:
            _sampler(args)
        except SamplerError as err:
            raise InputError(str(err)) from None
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, out, manifest)
    except (InputError, ConfigError, DatasetError, EpisodeError, SimulationError,
            DiagnosticsError, FileNotFoundError, IsADirectoryError) as err:
        print(f"mpep: error: {err}", file=sys.stderr)
        code = EXIT_INPUT
    except (SamplerError, LikelihoodError, FloatingPointError,
            np.linalg.LinAlgError) as err:
        print(f"mpep: numerical failure: {err}", file=sys.stderr)
        code = EXIT_NUMERICAL
    if out.is_dir():
        manifest.write(out, code, before, manifest_name)
    if code == EXIT_CONVERGENCE:
        print("mpep: convergence gate failed (R-hat < 1.05 and ESS >= 400 required); "
              "outputs were written", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
