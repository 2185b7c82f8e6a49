"""Command-line front end: strict YAML configs, experiment dispatch, reports.

Exit codes
----------
0  success / every experiment passed
1  configuration error (syntax, unknown key, invalid table or parameters)
2  horizon violation (probe found escaping rays, or a flight exceeded the cap)
3  numerical failure (any other runtime error inside the simulation)
4  at least one experiment verdict was Fail
5  at least one experiment verdict was Inconclusive (and none failed)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from . import experiments as ex
from .dynamics import run_chain
from .errors import BilliardError, DomainError, NoCollisionWithinCap, UnsupportedRegime
from .geometry import (
    BilliardTable,
    Disk,
    ValidationReport,
    reference_table,
    single_disk_table,
    validate_table,
)
from .parallel import ENV_THREADS, set_threads
from .statistics import Verdict, reference_state

EXIT_OK, EXIT_CONFIG, EXIT_HORIZON, EXIT_NUMERIC, EXIT_FAIL, EXIT_INCONCLUSIVE = 0, 1, 2, 3, 4, 5
FORMATS = ("csv", "json", "both")
TRACE_COLUMNS = ("trajectory_id", "step", "disk_id", "theta", "v_perp", "phi", "phi_incoming",
                 "flight_length", "flight_time")
METRIC_COLUMNS = ("experiment", "key", "value", "ci_low", "ci_high", "n", "seed")


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 report: Optional[ValidationReport] = None):
        self.line, self.column, self.report = line, column, report
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


@dataclass(frozen=True)
class ValidateConfig:
    n_rays: int = 1_000_000


@dataclass(frozen=True)
class SimulateConfig:
    n_trajectories: int = 1
    n_steps: int = 1000
    burn_in: int = 0


SECTIONS: dict[str, type] = {
    "validate": ValidateConfig,
    "simulate": SimulateConfig,
    **{name: cls for name, (cls, _) in ex.EXPERIMENTS.items()},
}


@dataclass
class RunConfig:
    table: BilliardTable
    table_doc: dict
    seed: int
    sections: dict = field(default_factory=dict)
    output: str = "out"
    format: str = "both"

    def section(self, name: str):
        return self.sections.get(name) or SECTIONS[name]()

    def __eq__(self, other):
        return (isinstance(other, RunConfig) and self.table == other.table
                and self.seed == other.seed and self.output == other.output
                and self.format == other.format
                and {k: self.section(k) for k in SECTIONS} == {k: other.section(k) for k in SECTIONS})


# ----------------------------------------------------------------- parsing


def _strict(doc: Any, allowed: set, where: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(map(str, unknown))}")
    return doc


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float) or default is None:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(_coerce(v, default[0] if default else 0.0, f"{where}[{i}]")
                     for i, v in enumerate(value))
    return value


def _section(name: str, doc) -> Any:
    cls = SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    doc = _strict(doc, set(fields), name)
    base = cls()
    kw = {k: _coerce(v, getattr(base, k), f"{name}.{k}") for k, v in doc.items()}
    cfg = cls(**kw)
    for k in fields:
        v = getattr(cfg, k)
        if k.startswith(("n_", "steps", "chain_steps", "bins")) and isinstance(v, int) and v <= 0:
            raise ConfigError(f"{name}.{k} must be positive")
        if k == "burn_in" and v < 0:
            raise ConfigError(f"{name}.burn_in must be non-negative")
    return cfg


def _table(doc) -> tuple[BilliardTable, dict]:
    doc = _strict(doc, {"preset", "disks", "sigma_cap", "beta", "radius"}, "table")
    preset = doc.get("preset", "reference" if "disks" not in doc else None)
    if preset is not None and "disks" in doc:
        raise ConfigError("table takes either 'preset' or 'disks', not both")
    beta = _coerce(doc.get("beta", 1.0), 1.0, "table.beta")
    if preset == "reference":
        if "radius" in doc:
            raise ConfigError("table.radius only applies to the single_disk preset")
        table = reference_table(beta, **({"sigma_cap": _coerce(doc["sigma_cap"], 1.0, "table.sigma_cap")}
                                         if "sigma_cap" in doc else {}))
    elif preset == "single_disk":
        kw = {}
        if "radius" in doc:
            kw["radius"] = _coerce(doc["radius"], 1.0, "table.radius")
        if "sigma_cap" in doc:
            kw["sigma_cap"] = _coerce(doc["sigma_cap"], 1.0, "table.sigma_cap")
        table = single_disk_table(beta=beta, **kw)
    elif preset is None:
        if "beta" in doc or "radius" in doc:
            raise ConfigError("table.beta / table.radius only apply to presets; set beta per disk")
        disks = doc["disks"]
        if not isinstance(disks, list):
            raise ConfigError("table.disks must be a list")
        out = []
        for i, d in enumerate(disks):
            d = _strict(d, {"center", "radius", "beta"}, f"table.disks[{i}]")
            if "center" not in d or "radius" not in d:
                raise ConfigError(f"table.disks[{i}] needs center and radius")
            c = _coerce(d["center"], (0.0,), f"table.disks[{i}].center")
            if len(c) != 2:
                raise ConfigError(f"table.disks[{i}].center must have two coordinates")
            out.append(Disk(c, _coerce(d["radius"], 1.0, f"table.disks[{i}].radius"),
                            _coerce(d.get("beta", 1.0), 1.0, f"table.disks[{i}].beta")))
        table = BilliardTable(tuple(out), _coerce(doc.get("sigma_cap", 1.0), 1.0, "table.sigma_cap"))
    else:
        raise ConfigError(f"unknown table preset {preset!r}")
    return table, ex.table_dict(table)


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a YAML run configuration."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None)
    doc = _strict(doc, {"seed", "table", "output", "format", *SECTIONS}, "config")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    table, table_doc = _table(doc.get("table"))
    report = validate_table(table)
    if not report.ok:
        raise ConfigError(f"invalid table: {report}", report=report)
    fmt = doc.get("format", "both")
    if fmt not in FORMATS:
        raise ConfigError(f"format must be one of {', '.join(FORMATS)}")
    output = doc.get("output", "out")
    if not isinstance(output, str):
        raise ConfigError("output must be a path string")
    sections = {name: _section(name, doc[name]) for name in SECTIONS if name in doc}
    cfg = RunConfig(table, table_doc, seed, sections, output, fmt)
    drift = cfg.section("drift")
    try:
        ex.drift_params(table, drift)
    except DomainError as e:
        raise ConfigError(f"drift: {e}")
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    doc = {"seed": cfg.seed, "table": cfg.table_doc, "output": cfg.output, "format": cfg.format}
    for name, sec in cfg.sections.items():
        doc[name] = ex._plain(sec)
    return yaml.safe_dump(doc, sort_keys=True)


# ----------------------------------------------------------------- output


def fmt_float(x) -> str:
    """Shortest round-trip decimal form."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _json_value(x):
    if isinstance(x, float):
        return None if math.isnan(x) else x
    if isinstance(x, dict):
        return {k: _json_value(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_value(v) for v in x]
    return x


def write_report(rep: ex.ExperimentReport, out: Path, fmt: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if fmt in ("json", "both"):
        p = out / f"{rep.name}.json"
        p.write_text(json.dumps(_json_value(rep.to_dict()), indent=2, sort_keys=True) + "\n")
        paths.append(p)
    if fmt in ("csv", "both"):
        p = out / f"{rep.name}.csv"
        lines = [",".join(METRIC_COLUMNS)]
        for m in rep.metrics:
            lines.append(",".join([rep.name, m.key, fmt_float(m.value), fmt_float(m.ci_low),
                                   fmt_float(m.ci_high), str(int(m.n)), str(rep.seed)]))
        with open(p, "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        paths.append(p)
    return paths


def write_trace(rows: list, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(",".join(TRACE_COLUMNS) + "\n")
        for tid, tr in rows:
            for k in range(len(tr)):
                f.write(",".join([str(tid), str(k), str(int(tr.disk[k])), fmt_float(tr.theta[k]),
                                  fmt_float(tr.v_perp[k]), fmt_float(tr.phi[k]),
                                  fmt_float(tr.phi_incoming[k]), fmt_float(tr.flight_length[k]),
                                  fmt_float(tr.flight_time[k])]) + "\n")


# --------------------------------------------------------------- dispatch


class _Log:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str):
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)


_VERDICT_EXIT = {Verdict.PASS: EXIT_OK, Verdict.FAIL: EXIT_FAIL,
                 Verdict.INCONCLUSIVE: EXIT_INCONCLUSIVE}


def _combine(codes: list[int]) -> int:
    for c in (EXIT_CONFIG, EXIT_HORIZON, EXIT_NUMERIC, EXIT_FAIL, EXIT_INCONCLUSIVE):
        if c in codes:
            return c
    return EXIT_OK


def _validate(cfg: RunConfig, out: Path, log) -> tuple[int, ex.ExperimentReport]:
    t0 = time.perf_counter()
    vc = cfg.section("validate")
    report, hz = ex.check_table(cfg.table, vc.n_rays, cfg.seed)
    metrics = [ex.Metric("table_violations", float(len(report.violations))),
               ex.Metric("horizon_violations", float(hz.violations), n=hz.n_rays),
               ex.Metric("sigma_max_hat", hz.sigma_max_hat, n=hz.n_rays),
               ex.Metric("sigma_min_hat", hz.sigma_min_hat, n=hz.n_rays)]
    ok = report.ok and hz.violations == 0
    rep = ex.ExperimentReport("validate", ex.config_digest(cfg.table, vc, cfg.seed), cfg.seed,
                              metrics, Verdict.PASS if ok else Verdict.FAIL,
                              time.perf_counter() - t0, ex._plain(vc))
    write_report(rep, out, cfg.format)
    log(f"validate: {hz.violations} escaping rays of {hz.n_rays}, "
        f"sigma_max_hat={hz.sigma_max_hat:.6g}")
    return (EXIT_OK if ok else EXIT_HORIZON), rep


def _simulate(cfg: RunConfig, out: Path, log) -> int:
    sc = cfg.section("simulate")
    start = reference_state(cfg.table)
    rows = []
    for tid in range(sc.n_trajectories):
        tr = run_chain(cfg.table, start, sc.n_steps, ex.stream(cfg.seed, "simulate", tid),
                       burn_in=sc.burn_in)
        rows.append((tid, tr))
    write_trace(rows, out / "trace.csv")
    log(f"simulate: wrote {sc.n_trajectories} x {sc.n_steps} steps to {out / 'trace.csv'}")
    return EXIT_OK


def _run_experiment(name: str, cfg: RunConfig, out: Path, log) -> int:
    _, fn = ex.EXPERIMENTS[name]
    rep = fn(cfg.table, cfg.section(name), cfg.seed)
    write_report(rep, out, cfg.format)
    log(f"{name}: {rep.verdict.value} in {rep.wall_time:.1f}s")
    print(f"{name}\t{rep.verdict.value}")
    return _VERDICT_EXIT[rep.verdict]


def dispatch(subcommand: str, cfg: RunConfig, quiet: bool = False) -> int:
    log = _Log(quiet)
    out = Path(cfg.output)
    try:
        code, _ = _validate(cfg, out, log)
        if subcommand == "validate":
            print(f"validate\t{'ok' if code == EXIT_OK else 'horizon-violation'}")
            return code
        if code != EXIT_OK:
            log("aborting: the table failed the horizon probe")
            return code
        if subcommand == "simulate":
            return _simulate(cfg, out, log)
        if subcommand == "all":
            return _combine([_run_experiment(n, cfg, out, log) for n in ex.EXPERIMENTS])
        return _run_experiment(subcommand, cfg, out, log)
    except NoCollisionWithinCap as e:
        log(f"horizon violation: {e}")
        return EXIT_HORIZON
    except UnsupportedRegime as e:
        log(f"configuration error: {e}")
        return EXIT_CONFIG
    except (BilliardError, FloatingPointError, ArithmeticError, ValueError) as e:
        log(f"numerical failure: {e}")
        return EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermo-billiards",
                                description="Random billiards with thermostat disks.")
    p.add_argument("subcommand", choices=["validate", "simulate", *ex.EXPERIMENTS, "all"])
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--format", choices=FORMATS, help="report format")
    p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${ENV_THREADS})")
    p.add_argument("--quiet", action="store_true", help="no progress on stderr")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text() if args.config else "{}"
        cfg = parse_config(text)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must be a 64-bit unsigned integer")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output = args.out
        if args.format is not None:
            cfg.format = args.format
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            set_threads(args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        if e.report is not None:
            for v in e.report.violations:
                print(f"  {v}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.subcommand, cfg, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
