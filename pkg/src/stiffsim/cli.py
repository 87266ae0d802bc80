"""Command-line entry point: config parsing, experiment dispatch, artifacts.

Exit codes: 0 when the run completed and every flag is pass or n/a, 1 when a
flag failed, 2 for configuration errors, 3 for other package errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from . import problems as P
from .errors import (
    MissingField,
    ParseError,
    StiffSimError,
    UnknownMethod,
    UnknownProblem,
)
from .integrators import Method

COMMANDS = ("simulate", "converge", "moments", "fpu-demo", "stability-scan", "lemma-check")
GRID = [0.1, 0.05, 0.025, 0.0125]

_COMMAND_DEFAULTS = {
    "simulate": {"problem": "two-spring", "method": "sim1-lan", "H": 0.1, "T": 5.0,
                 "paths": 100},
    "converge": {"problem": "fpu", "method": "sim1-ham", "grid": GRID, "T": 1.0, "paths": 1},
    "moments": {"problem": "two-spring", "method": "sim1-lan", "H": 0.1, "T": 5.0,
                "paths": 5000, "resonance": "full", "compare_method": "gla1",
                "flag_observables": ["y"]},
    "fpu-demo": {"problem": "fpu", "method": "sim1-ham", "H": 0.1, "T": 1000.0, "paths": 1},
    "stability-scan": {"problem": "harmonic", "method": "sim1-ham", "H_range": [0.5, 0.6],
                       "samples": 100, "T": 20.0, "paths": 1},
    "lemma-check": {"problem": "two-spring", "method": "sim1-lan", "grid": GRID,
                    "paths": 2000},
}


@dataclass
class RunConfig:
    command: str
    problem: str
    method: str
    params: dict = field(default_factory=dict)
    H: float = 0.1
    grid: list = field(default_factory=lambda: list(GRID))
    T: float = 1.0
    paths: int = 1
    seed: int = 0
    out: str = "stiffsim-out"
    svg: bool = False
    # command-specific knobs
    h: Optional[float] = None
    reference: Optional[str] = None
    omegas: list = field(default_factory=list)
    sweep_H: Optional[float] = None
    order_band: Optional[list] = None
    resonance: Optional[str] = None
    compare_method: str = "gla1"
    compare_h: Optional[float] = None
    flag_observables: list = field(default_factory=list)
    reference_h: float = 5e-4
    H_range: list = field(default_factory=lambda: [0.5, 0.6])
    samples: int = 100

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_POSITIVE = ("H", "T", "paths", "samples", "reference_h")


def _line_from_toml_error(exc):
    line = getattr(exc, "lineno", None)
    if line is None:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else None
    return line


def load_config_file(path) -> dict:
    """Read a JSON or TOML config (by suffix; unknown suffixes try JSON then TOML)."""
    path = Path(path)
    text = path.read_text()
    suffix = path.suffix.lower()
    if suffix == ".json" or suffix not in (".toml", ".json"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            if suffix == ".json":
                raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}", _line_from_toml_error(exc)) from None


def resolve_config(raw: dict, overrides: dict = None) -> RunConfig:
    """Merge command defaults, file values and flag overrides, then validate."""
    merged = {k: v for k, v in dict(raw).items()}
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    if "command" not in merged:
        raise MissingField("command")
    command = merged["command"]
    if command not in COMMANDS:
        raise MissingField(f"command must be one of {', '.join(COMMANDS)}; got {command!r}")
    values = dict(_COMMAND_DEFAULTS[command])
    values.update(merged)
    unknown = set(values) - _FIELDS
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if values["problem"] not in P.problem_names():
        raise UnknownProblem(values["problem"])
    for key in ("method", "compare_method"):
        if key in values:
            try:
                values[key] = Method(values[key]).value
            except ValueError:
                raise UnknownMethod(values[key]) from None
    if values.get("reference") not in (None, "dop853"):
        try:
            Method(values["reference"])
        except ValueError:
            raise UnknownMethod(values["reference"]) from None
    cfg = RunConfig(**values)
    # fill problem defaults so the echoed config is complete
    cfg.params = P.config_dict(P.make_config(cfg.problem, cfg.params))
    for name in _POSITIVE:
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and v > 0):
            raise ParseError(f"{name} must be positive, got {v!r}")
    if any(not H > 0 for H in cfg.grid):
        raise ParseError("grid values must be positive")
    cfg.grid = sorted((float(H) for H in cfg.grid), reverse=True)
    cfg.seed = int(cfg.seed)
    if not 0 <= cfg.seed < 2 ** 64:
        raise ParseError("seed must be an unsigned 64-bit integer")
    return cfg


def parse_config(path=None, overrides: dict = None) -> RunConfig:
    raw = load_config_file(path) if path else {}
    return resolve_config(raw, overrides)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return _cell(v.item())
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, float) and obj != obj:
        return None
    return obj


def emit_artifacts(result, cfg: RunConfig, wall_time: float = None) -> list:
    """Write CSVs, summary.json, the resolved config and optional SVGs."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(out / "config.resolved.json")
    for name, (header, rows) in result.tables.items():
        write_csv(out / name, header, rows)
        written.append(out / name)
    summary = {"command": cfg.command, "problem": cfg.problem, "method": cfg.method,
               "seed": cfg.seed, "flags": result.flags,
               "all_pass": result.ok, "wall_time_s": wall_time}
    summary.update(result.summary)
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(out / "summary.json")
    if cfg.svg:
        for name, svg in result.plots.items():
            (out / name).write_text(svg)
            written.append(out / name)
    return written


def build_parser():
    ap = argparse.ArgumentParser(prog="stiffsim",
                                 description="Stochastic impulse method experiments.")
    ap.add_argument("--config", help="JSON or TOML run configuration")
    ap.add_argument("--command", choices=COMMANDS)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--paths", type=int)
    ap.add_argument("--out")
    ap.add_argument("--svg", action="store_true", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"command": args.command, "seed": args.seed, "paths": args.paths,
                 "out": args.out, "svg": args.svg}
    try:
        cfg = parse_config(args.config, overrides)
    except (StiffSimError, OSError) as exc:
        print(f"stiffsim: config error: {exc}", file=sys.stderr)
        return 2
    from .experiments import run

    t0 = time.perf_counter()
    try:
        result = run(cfg)
    except StiffSimError as exc:
        print(f"stiffsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    emit_artifacts(result, cfg, time.perf_counter() - t0)
    for name, flag in result.flags.items():
        print(f"{name}: {flag}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
