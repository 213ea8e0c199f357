"""Command-line front end: parse config, run suites, emit reports.

The config file is a flat sectioned key-value format, chosen over a schema
library so malformed input can be reported with the exact line number and
key name. `[common]` applies to every suite; a `[suite]` section overrides
it. Command-line --seed/--workers override both.

Outputs land in --out: ``report.json`` (machine, deterministic byte-for-byte
for a given config and seed), one CSV per table (header row, '.' decimal,
LF line endings), ``config-echo.txt`` with unit comments, and the human
tables on stdout. All files are written atomically (temp file + rename).

Exit codes: 0 all gates passed, 1 at least one gate failed, 2 bad config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import InvalidConfigError, ZrlabError
from .experiments import SUITES, default_config

__all__ = ["main", "parse_config_file", "ConfigFileError"]


class ConfigFileError(ZrlabError):
    code = "config-file"


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


# key -> (field name, parser, unit/help text)
KEY_SPECS: dict[str, tuple[str, object, str]] = {
    "rate": ("rate_name", str, "rate-catalog name: qtasep | tanh | linear"),
    "n": ("n", int, "scaling parameter (dimensionless)"),
    "rho": ("rho", float, "density (particles per site)"),
    "sites": ("sites", int, "lattice sites; 0 selects 32*n"),
    "horizon": ("horizon", float, "trajectory length (macroscopic time)"),
    "trajectories": ("trajectories", int, "ensemble size (count)"),
    "checkpoints": ("checkpoints", int, "checkpoint intervals per trajectory (count)"),
    "block_grid": ("block_grid", _int_list,
                   "comma-separated block lengths (sites); empty selects n/8..2n"),
    "eps_grid": ("eps_grid", _float_list,
                 "comma-separated block scales (macroscopic length)"),
    "n_grid": ("n_grid", _int_list, "comma-separated n values for scaling scans"),
    "test_function": ("test_function", str, "test function: bump | gaussian"),
    "test_radius": ("test_radius", float, "test-function support scale (macroscopic length)"),
    "samples": ("samples", int, "measure-level sample count"),
    "events": ("events", int, "event count for coupling runs"),
    "seed": ("seed", int, "RNG seed (unsigned 64-bit)"),
    "workers": ("workers", int, "worker processes (count; does not affect results)"),
}

_SECTIONS = ("common",) + tuple(SUITES)


def parse_config_file(path: str | Path) -> dict[str, dict[str, object]]:
    """Sectioned key=value text -> {section: {field: value}}.

    Unknown sections, unknown keys, and unparsable values raise
    ConfigFileError naming the offending line and key.
    """
    sections: dict[str, dict[str, object]] = {}
    current = "common"
    sections[current] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigFileError(
                    f"line {lineno}: unknown section [{name}]; "
                    f"expected one of {', '.join(_SECTIONS)}")
            current = name
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigFileError(
                f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KEY_SPECS:
            raise ConfigFileError(
                f"line {lineno}: unknown key {key!r}; "
                f"known keys: {', '.join(sorted(KEY_SPECS))}")
        field, parser, _ = KEY_SPECS[key]
        try:
            sections[current][field] = parser(value)
        except ValueError as exc:
            raise ConfigFileError(
                f"line {lineno}: key {key!r}: cannot parse {value!r} ({exc})") from exc
    return sections


def _suite_config(suite: str, sections: dict, seed, workers):
    overrides: dict[str, object] = {}
    overrides.update(sections.get("common", {}))
    overrides.update(sections.get(suite, {}))
    if seed is not None:
        overrides["seed"] = seed
    if workers is not None:
        overrides["workers"] = workers
    return default_config(suite, **overrides)


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data)
    os.replace(tmp, path)


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_tables(outdir: Path, suite: str, report) -> None:
    for tname, cols in report.tables.items():
        header = list(cols)
        rows = zip(*(cols[c] for c in header)) if header else ()
        lines = [",".join(header)]
        lines.extend(",".join(_csv_cell(v) for v in row) for row in rows)
        _atomic_write(outdir / f"{suite}_{tname}.csv", "\n".join(lines) + "\n")


def _echo_config(cfg) -> str:
    by_field = {spec[0]: (key, spec[2]) for key, spec in KEY_SPECS.items()}
    lines = []
    for field in ("rate_name", "n", "rho", "sites", "horizon", "trajectories",
                  "checkpoints", "block_grid", "eps_grid", "n_grid",
                  "test_function", "test_radius", "samples", "events", "seed"):
        key, unit = by_field[field]
        value = getattr(cfg, field)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}  # {unit}")
    return "\n".join(lines) + "\n"


def _build_parser() -> argparse.ArgumentParser:
    key_help = "\n".join(f"  {key:<14s} {spec[2]}" for key, spec in KEY_SPECS.items())
    parser = argparse.ArgumentParser(
        prog="zrlab",
        description="Zero-range fluctuation-field experiments and exact oracles.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config file keys (any [common] or per-suite section):\n" + key_help,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    descriptions = {
        "oracle": "exact identity suites (stationarity, IBP, expansion, Taylor, fugacity)",
        "sample": "invariant-measure diagnostics and marginal tables",
        "simulate": "one trajectory with full observable series",
        "qv": "martingale / quadratic-variation ensemble",
        "bg2": "second-order block-replacement scaling scan",
        "ec": "energy-condition scan over block scales",
        "static-var": "time-zero field variance and normality",
        "qtasep": "coupled exclusion / zero-range consistency",
        "all": "every suite above, one combined report",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=Path, default=None,
                       help="sectioned key=value config file")
        p.add_argument("--out", type=Path, default=Path("zrlab-out"),
                       help="output directory (default: ./zrlab-out)")
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed override (unsigned 64-bit)")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (never changes results)")
        p.add_argument("--quiet", action="store_true",
                       help="suppress stdout tables")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        sections = parse_config_file(args.config) if args.config else {}
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    suites = list(SUITES) if args.command == "all" else [args.command]
    outdir: Path = args.out
    outdir.mkdir(parents=True, exist_ok=True)

    reports = {}
    echoes = []
    try:
        for suite in suites:
            cfg = _suite_config(suite, sections, args.seed, args.workers)
            report = SUITES[suite](cfg)
            reports[suite] = report
            echoes.append(f"[{suite}]\n{_echo_config(cfg)}")
            _write_tables(outdir, suite, report)
            if not args.quiet:
                print(report.text())
    except (InvalidConfigError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    passed = all(r.passed for r in reports.values())
    doc = {
        "command": args.command,
        "passed": passed,
        "suites": {name: rep.as_dict() for name, rep in reports.items()},
    }
    _atomic_write(outdir / "report.json",
                  json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _atomic_write(outdir / "config-echo.txt", "\n".join(echoes))
    if not args.quiet:
        print(f"{'PASS' if passed else 'FAIL'}  (report in {outdir / 'report.json'})")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
