"""Command-line front end: config files, presets, execution, table rendering.

Configuration is a flat INI-style file.  A [run] section sets the study shape
and one [estimator.<label>] section per estimator sets its engine and knobs.
Unknown sections or keys are hard errors; a config that parses is guaranteed
to run without configuration-related failure.

Example::

    [run]
    scenarios = ex1-normal
    n = 200, 2000
    replicates = 10

    [estimator.2S]
    engine = parametric-2S
    design = 2S
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import bboot, dgp, harness
from .errors import (CausalbbError, ParseError, SchemaError,
                     UnknownScenarioError, ValidationError)
from .harness import METRICS_HEADER, EstimatorSpec, MetricsRow

_FORMATS = ("csv", "aligned-text")
_RUN_KEYS = ("scenarios", "n", "replicates", "draws", "seed", "workers",
             "out", "format", "clamp")
# keys each engine understands; anything else in its section is rejected
_PARAMETRIC_KEYS = frozenset({"engine", "design", "prior_sd", "draws"})
_ENGINE_KEYS = {
    "parametric-JT": _PARAMETRIC_KEYS,
    "parametric-CF": _PARAMETRIC_KEYS,
    "parametric-2S": _PARAMETRIC_KEYS,
    "bb-two-step": _PARAMETRIC_KEYS | {"gamma", "linked"},
    "bb-cut-feedback": _PARAMETRIC_KEYS | {"gamma"},
    "bb-ipw": frozenset({"engine", "truncation", "draws"}),
    "bb-att": frozenset({"engine", "truncation", "draws"}),
    "bb-msm": frozenset({"engine", "truncation", "draws"}),
    "bb-dr-poisson": frozenset({"engine", "draws"}),
}
_EST_KEYS = frozenset().union(*_ENGINE_KEYS.values())
_CF_SOURCES = ("parametric-posterior", "unlinked-BB", "true")
# engines whose case weights a global clamp applies to
_CLAMP_ENGINES = ("bb-ipw", "bb-att", "bb-msm")

_SEED_ENV = "CAUSALBB_SEED"


@dataclass(frozen=True)
class RunConfig:
    """A fully validated study: what to run, where, and how."""

    scenarios: tuple
    estimators: tuple
    n_list: tuple
    R: int
    L: int
    master_seed: int
    workers: int
    out: str
    format: str = "csv"
    clamp: Optional[float] = None


# ---------------------------------------------------------------------------
# Config parsing


def _split_list(raw: str) -> list:
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        raw = raw[1:-1]
    return [tok for tok in raw.replace(",", " ").split() if tok]


def _to_int(key: str, raw: str) -> int:
    try:
        return int(str(raw).strip())
    except ValueError:
        raise ParseError(f"key {key!r}: expected an integer, got {raw!r}") from None


def _to_float(key: str, raw: str) -> float:
    try:
        return float(str(raw).strip())
    except ValueError:
        raise ParseError(f"key {key!r}: expected a number, got {raw!r}") from None


def _to_bool(key: str, raw: str) -> bool:
    states = {"1": True, "true": True, "yes": True, "on": True,
              "0": False, "false": False, "no": False, "off": False}
    try:
        return states[str(raw).strip().lower()]
    except KeyError:
        raise ParseError(f"key {key!r}: expected a boolean, got {raw!r}") from None


def _preset_text(name: str) -> str:
    root = resources.files(__package__) / "presets"
    try:
        return (root / f"{name}.cfg").read_text(encoding="utf-8")
    except (FileNotFoundError, OSError):
        avail = sorted(entry.name[:-4] for entry in root.iterdir()
                       if entry.name.endswith(".cfg"))
        raise ParseError(f"unknown preset {name!r}; available: "
                         f"{', '.join(avail)}") from None


def list_presets() -> list[str]:
    root = resources.files(__package__) / "presets"
    return sorted(entry.name[:-4] for entry in root.iterdir()
                  if entry.name.endswith(".cfg"))


def _build_estimator(section: str, items: dict, default_L: int) -> EstimatorSpec:
    label = section[len("estimator."):]
    if not label:
        raise ParseError(f"section [{section}] has an empty estimator label")
    for key in items:
        if key not in _EST_KEYS:
            raise ParseError(f"unknown key {key!r} in section [{section}]")
    engine = items.get("engine", "bb-two-step").strip()
    if engine not in harness.ENGINES:
        raise ValidationError(f"estimator {label!r}: unknown engine {engine!r}")
    allowed = _ENGINE_KEYS[engine]
    for key in items:
        if key not in allowed:
            raise ValidationError(f"estimator {label!r}: key {key!r} does not "
                                  f"apply to engine {engine}")
    kwargs = {"label": label, "engine": engine, "L": default_L}
    if "design" in items:
        kwargs["design"] = items["design"].strip()
    if "gamma" in items:
        kwargs["gamma_source"] = bboot._canon_gamma_source(items["gamma"].strip())
    if "linked" in items:
        kwargs["linked"] = _to_bool("linked", items["linked"])
    if "prior_sd" in items:
        kwargs["prior_sd"] = _to_float("prior_sd", items["prior_sd"])
        if kwargs["prior_sd"] <= 0:
            raise ValidationError(f"estimator {label!r}: prior_sd must be positive")
    if "truncation" in items:
        kwargs["truncation"] = _to_float("truncation", items["truncation"])
    if "draws" in items:
        kwargs["L"] = _to_int("draws", items["draws"])
    return EstimatorSpec(**kwargs)


def _check_gamma(est: EstimatorSpec) -> None:
    """Gamma-source coherence that the engines would only catch at run time."""
    src = est.gamma_source
    if src is None:
        return
    if est.engine == "bb-cut-feedback" and src not in _CF_SOURCES:
        raise ValidationError(f"estimator {est.label!r}: cut feedback accepts "
                              f"gamma in {_CF_SOURCES}, not {src!r}")
    if est.design in ("PS", "PS-ext") and src != "true":
        raise ValidationError(f"estimator {est.label!r}: design {est.design} "
                              f"uses the true coefficients; set gamma = true")
    if src == "none":
        raise ValidationError(f"estimator {est.label!r}: gamma = none is "
                              f"implied by a score-free design; drop the key")


def _validate(config: RunConfig) -> RunConfig:
    if not config.scenarios:
        raise ValidationError("no scenarios selected")
    if not config.estimators:
        raise ValidationError("no estimators configured")
    if not config.n_list:
        raise ValidationError("no sample sizes configured (key 'n')")
    if config.R < 1:
        raise ValidationError("replicates must be at least 1")
    if config.L < 1:
        raise ValidationError("draws must be at least 1")
    if config.workers < 1:
        raise ValidationError("workers must be at least 1")
    if config.format not in _FORMATS:
        raise ValidationError(f"format must be one of {_FORMATS}")
    if config.clamp is not None and config.clamp <= 0:
        raise ValidationError("clamp must be positive")
    for n in config.n_list:
        if n < 2:
            raise ValidationError("sample sizes must be at least 2")
    seen = set()
    for est in config.estimators:
        if est.label in seen:
            raise ValidationError(f"duplicate estimator label {est.label!r}")
        seen.add(est.label)
        _check_gamma(est)
    specs = []
    for name in config.scenarios:
        try:
            specs.append(dgp.get_scenario(name))
        except UnknownScenarioError:
            raise ValidationError(f"unknown scenario {name!r}; see "
                                  f"'causalbb scenarios'") from None
    for spec in specs:
        for est in config.estimators:
            harness.validate_estimator(est, spec)
    return config


def parse_config(path: Optional[str] = None, *, preset: Optional[str] = None,
                 overrides: Optional[dict] = None) -> RunConfig:
    """Parse and fully validate a study configuration.

    Exactly one of path/preset supplies the file; overrides (command-line
    values) take precedence over file values.  Every estimator/scenario
    combination is checked here so that cmd_run cannot fail on configuration.
    """
    if (path is None) == (preset is None):
        raise ParseError("exactly one of a config file or a preset is required")
    if preset is not None:
        text, origin = _preset_text(preset), f"preset:{preset}"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from None
        origin = str(path)
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None

    for section in cp.sections():
        if section != "run" and not section.startswith("estimator."):
            raise ParseError(f"unknown section [{section}]")
    if not cp.has_section("run"):
        raise ParseError("missing [run] section")
    run = dict(cp.items("run"))
    for key in run:
        if key not in _RUN_KEYS:
            raise ParseError(f"unknown key {key!r} in section [run]")

    ov = dict(overrides or {})
    scenarios = ov.get("scenarios")
    if scenarios is None:
        scenarios = _split_list(run["scenarios"]) if "scenarios" in run else []
    n_list = ov.get("n")
    if n_list is None:
        n_list = [_to_int("n", tok) for tok in _split_list(run.get("n", ""))]
    R = ov.get("R", _to_int("replicates", run["replicates"])
               if "replicates" in run else None)
    if R is None:
        raise ValidationError("replicates is required")
    L = ov.get("L", _to_int("draws", run["draws"]) if "draws" in run else 1000)
    if "seed" in ov:
        seed = ov["seed"]
    elif "seed" in run:
        seed = _to_int("seed", run["seed"])
    elif os.environ.get(_SEED_ENV):
        seed = _to_int(_SEED_ENV, os.environ[_SEED_ENV])
    else:
        seed = 0
    workers = ov.get("workers", _to_int("workers", run["workers"])
                     if "workers" in run else (os.cpu_count() or 1))
    out = ov.get("out", run.get("out", ".").strip() or ".")
    fmt = ov.get("format", run.get("format", "csv").strip())
    clamp = ov.get("clamp", _to_float("clamp", run["clamp"])
                   if "clamp" in run else None)

    estimators = []
    for section in cp.sections():
        if section.startswith("estimator."):
            estimators.append(_build_estimator(section, dict(cp.items(section)), L))
    if "estimators" in ov:
        by_label = {est.label: est for est in estimators}
        picked = []
        for label in ov["estimators"]:
            if label not in by_label:
                raise ValidationError(f"unknown estimator label {label!r}; "
                                      f"config defines {sorted(by_label)}")
            picked.append(by_label[label])
        estimators = picked
    if clamp is not None:
        estimators = [replace(est, truncation=clamp)
                      if est.engine in _CLAMP_ENGINES and est.truncation is None
                      else est for est in estimators]

    config = RunConfig(scenarios=tuple(scenarios), estimators=tuple(estimators),
                       n_list=tuple(n_list), R=int(R), L=int(L),
                       master_seed=int(seed), workers=int(workers),
                       out=str(out), format=str(fmt), clamp=clamp)
    return _validate(config)


# ---------------------------------------------------------------------------
# Commands


def cmd_run(config: RunConfig) -> int:
    """Execute the study; write metrics.csv and replicates.csv to the out dir."""
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    merged = harness.RunResult()
    try:
        for name in config.scenarios:
            res = harness.run_replicates(name, config.estimators, config.n_list,
                                         config.R, config.master_seed,
                                         workers=config.workers)
            merged.rows.extend(res.rows)
            merged.records.update(res.records)
            merged.failures.update(res.failures)
    except CausalbbError as exc:
        print(f"causalbb: execution failed: {exc}", file=sys.stderr)
        return 3
    metrics_path = outdir / "metrics.csv"
    harness.write_metrics_csv(merged.rows, metrics_path)
    harness.write_records_csv(merged, outdir / "replicates.csv")
    print(f"wrote {metrics_path} and {outdir / 'replicates.csv'}",
          file=sys.stderr)
    if config.format == "aligned-text":
        sys.stdout.write(render_table(merged.rows))
    failed = [row for row in merged.rows if not math.isfinite(row.bias)]
    if failed:
        for row in failed:
            print(f"causalbb: cell failed: scenario={row.scenario} "
                  f"estimator={row.estimator} n={row.n}", file=sys.stderr)
        return 3
    return 0


def load_metrics_csv(path) -> list[MetricsRow]:
    """Read a metrics CSV back into rows, strictly against the schema."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: empty file") from None
            if tuple(header) != METRICS_HEADER:
                raise SchemaError(f"{path}: header {header!r} does not match "
                                  f"the metrics schema")
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(METRICS_HEADER):
                    raise SchemaError(f"{path}:{lineno}: expected "
                                      f"{len(METRICS_HEADER)} fields, got {len(rec)}")
                try:
                    rows.append(MetricsRow(
                        scenario=rec[0], estimator=rec[1], n=int(rec[2]),
                        R=int(rec[3]), bias=float(rec[4]), sd=float(rec[5]),
                        rmse=float(rec[6]), coverage=float(rec[7]),
                        flagged_draws=int(rec[8]), wall_time=float(rec[9])))
                except ValueError as exc:
                    raise SchemaError(f"{path}:{lineno}: {exc}") from None
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


_METRIC_FIELDS = (("Bias", "bias"), ("SD", "sd"), ("RMSE", "rmse"),
                  ("Coverage", "coverage"))


def render_table(rows: Sequence[MetricsRow]) -> str:
    """Aligned text: per scenario, metric blocks x estimator rows x n columns."""
    lines = []
    scenarios = list(dict.fromkeys(row.scenario for row in rows))
    for sc in scenarios:
        sub = [row for row in rows if row.scenario == sc]
        labels = list(dict.fromkeys(row.estimator for row in sub))
        ns = sorted({row.n for row in sub})
        cells = {(row.estimator, row.n): row for row in sub}
        label_w = max(len(lab) for lab in labels) + 2
        col_w = max(10, max(len(str(n)) for n in ns) + 4)
        lines.append(f"scenario: {sc}")
        lines.append(" " * (2 + label_w)
                     + "".join(f"{'n=' + str(n):>{col_w}}" for n in ns))
        for title, fieldname in _METRIC_FIELDS:
            lines.append(title)
            for lab in labels:
                parts = [f"  {lab:<{label_w}}"]
                for n in ns:
                    row = cells.get((lab, n))
                    if row is None:
                        parts.append(" " * col_w)
                    else:
                        parts.append(f"{getattr(row, fieldname):>{col_w}.3f}")
                lines.append("".join(parts).rstrip())
            lines.append("")
    return "\n".join(lines) + "\n"


def cmd_table(paths: Sequence) -> str:
    """Render one or more metrics CSVs as a single aligned table."""
    rows = []
    for path in paths:
        rows.extend(load_metrics_csv(path))
    return render_table(rows)


def cmd_scenarios() -> str:
    lines = []
    for name in dgp.list_scenarios():
        spec = dgp.get_scenario(name)
        lines.append(f"{name:<16} p={spec.p}  treatment={spec.treatment[0]:<9} "
                     f"outcome={spec.outcome[0]:<7} estimand={spec.estimand[0]}")
    return "\n".join(lines) + "\n"


_ENGINE_NOTES = {
    "parametric-JT": "joint Gibbs sampler over exposure and outcome models",
    "parametric-CF": "exposure posterior draws propagated into the outcome stage",
    "parametric-2S": "posterior-mean score plugged into a conjugate outcome fit",
    "bb-two-step": "Dirichlet-weighted outcome fit; linked or unlinked score stage",
    "bb-cut-feedback": "per-draw score from an exposure posterior sample",
    "bb-ipw": "weighted-mean contrast under inverse-probability case weights",
    "bb-att": "treated/control contrast reweighting controls by fitted odds",
    "bb-dr-poisson": "augmented Poisson estimating equation, doubly robust",
    "bb-msm": "sequential-treatment counterfactual cell means",
}


def cmd_estimators() -> str:
    lines = [f"{name:<16} {_ENGINE_NOTES[name]}" for name in harness.ENGINES]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="causalbb",
        description="Bayesian propensity-score simulation studies")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a configured study")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="FILE", help="INI config file")
    src.add_argument("--preset", metavar="NAME",
                     help="built-in study (see the package presets)")
    run.add_argument("--scenarios", help="comma-separated scenario names")
    run.add_argument("--estimators",
                     help="subset of configured estimator labels")
    run.add_argument("--n", help="comma-separated sample sizes")
    run.add_argument("--R", type=int, help="replicates per cell")
    run.add_argument("--L", type=int, help="posterior draws per replicate")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--out", help="output directory (default: .)")
    run.add_argument("--format", choices=_FORMATS,
                     help="also print an aligned table with aligned-text")
    run.add_argument("--clamp", type=float,
                     help="case-weight truncation for the weighting engines")

    tab = sub.add_parser("table", help="render metrics CSVs as aligned text")
    tab.add_argument("paths", nargs="+", metavar="CSV")

    sub.add_parser("scenarios", help="list registered scenarios")
    sub.add_parser("estimators", help="list estimation engines")
    return ap


def _overrides_from_args(args: argparse.Namespace) -> dict:
    ov = {}
    if args.scenarios is not None:
        ov["scenarios"] = _split_list(args.scenarios)
    if args.estimators is not None:
        ov["estimators"] = _split_list(args.estimators)
    if args.n is not None:
        ov["n"] = [_to_int("n", tok) for tok in _split_list(args.n)]
    for name, key in (("R", "R"), ("L", "L"), ("seed", "seed"),
                      ("workers", "workers"), ("out", "out"),
                      ("format", "format"), ("clamp", "clamp")):
        value = getattr(args, name)
        if value is not None:
            ov[key] = value
    return ov


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config, preset=args.preset,
                                  overrides=_overrides_from_args(args))
            return cmd_run(config)
        if args.command == "table":
            sys.stdout.write(cmd_table(args.paths))
            return 0
        if args.command == "scenarios":
            sys.stdout.write(cmd_scenarios())
            return 0
        sys.stdout.write(cmd_estimators())
        return 0
    except (ParseError, SchemaError, ValidationError) as exc:
        print(f"causalbb: {exc}", file=sys.stderr)
        return 2
    except CausalbbError as exc:
        print(f"causalbb: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
