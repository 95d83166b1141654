"""Command-line interface: reproduce, simulate, analyze, fit.

Exit codes: 0 on success, 2 when a computed value falls outside its
acceptance window (reproduced Bell parameter, non-converged fit), 1 on any
usage, input, or data error.  All commands are deterministic given their
inputs and seed, and report files embed enough provenance to re-run them.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    ChshResult,
    CoincidenceTable,
    FitResult,
    SettingSummary,
    bell_test,
    count_clicks,
    count_coincidences,
    correlation_coefficient,
    cross_correlation,
    fit_heating,
    fit_visibility,
    predicted_visibility,
    read_counts,
    sideband_occupancy,
    table_from_pattern_counts,
    write_counts,
)
from .config import ConfigError, chsh_settings, data_dir_path, load_config, PhaseSetting
from .experiment import build_outcome_distribution
from .sampler import (
    HEADER as RECORDS_HEADER,
    SamplerError,
    SeedSpec,
    read_records,
    sample_counts,
    sample_records,
    write_records,
)

COUNTS_HEADER = "optobell-counts v1"
POINTS_HEADER = "optobell-points v1"
TABLE_S2_SHA256 = "cd222900fc86e25260213abbf3bcddeb0cab70e85ec4ed8e64061bb294a1a993"
S_WINDOW = (2.164, 2.184)
CHSH_LABELS = ((1, 1), (1, 2), (2, 1), (2, 2))

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_OUT_OF_RANGE = 2


class CliError(Exception):
    """User-facing command error; printed to stderr with exit code 1."""


@dataclasses.dataclass
class RunReport:
    """JSON-serializable record of one command run.

    Every field holds plain JSON types (dict/list/str/float/int/None) so the
    text round trip reproduces the object exactly.
    """

    command: str
    config: dict | None
    settings: dict
    chsh: dict | None
    fits: dict
    extras: dict
    provenance: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        if set(data) != names:
            raise CliError(f"report fields {sorted(data)} do not match {sorted(names)}")
        return cls(**data)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".optobell-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_setting(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(f"setting must look like 'i,j', got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise CliError(f"setting must be two integers, got {text!r}") from None


def label_key(label: tuple[int, int]) -> str:
    return f"{label[0]},{label[1]}"


def table_dict(table: CoincidenceTable) -> dict:
    return {"n11": table.n11, "n12": table.n12, "n21": table.n21, "n22": table.n22,
            "heralds": table.heralds, "trials": table.trials,
            "double_blue": table.double_blue}


def settings_dict(settings: dict) -> dict:
    out = {}
    for label, s in settings.items():
        out[label_key(label)] = {"table": table_dict(s.table), "e_point": s.e_point,
                                 "expectation": s.expectation,
                                 "ci_lo": s.ci_lo, "ci_hi": s.ci_hi}
    return out


def chsh_dict(result: ChshResult) -> dict:
    return {"s_point": result.s_point, "s_expected": result.s_expected,
            "ci_lo": result.ci_lo, "ci_hi": result.ci_hi,
            "sigma_violation": result.sigma_violation}


def fit_dict(fit: FitResult) -> dict:
    return {"params": dict(fit.params), "uncertainty": dict(fit.uncertainty),
            "residual_norm": fit.residual_norm, "converged": fit.converged,
            "iterations": fit.iterations}


def config_dict(config) -> dict:
    def plain(value):
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        return value
    return plain(config)


def provenance_dict(seed=None, inputs=(), config_path=None) -> dict:
    return {"version": __version__,
            "seed": seed,
            "config_path": config_path,
            "inputs": {os.path.basename(p): sha256_file(p) for p in inputs}}


def write_report(args, report: RunReport) -> None:
    if getattr(args, "out", None):
        atomic_write(args.out, report.to_json())


def print_bell_block(result: ChshResult, settings: dict, only=None) -> None:
    print("setting  E_point    E[dist]    CI16       CI84")
    for label in CHSH_LABELS:
        if only is not None and label != only:
            continue
        s = settings[label]
        print(f"{label_key(label)}      {s.e_point:+.6f}  {s.expectation:+.6f}  "
              f"{s.ci_lo:+.6f}  {s.ci_hi:+.6f}")
    print(f"S point estimate: {result.s_point:.7f}")
    print(f"S expectation: {result.s_expected:.6f}  "
          f"CI [{result.ci_lo:.6f}, {result.ci_hi:.6f}]")
    print(f"sigma violation: {result.sigma_violation:.2f}")


def classify_input(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    if header == RECORDS_HEADER:
        return "records"
    if header == COUNTS_HEADER:
        return "counts"
    raise CliError(f"{path}: unrecognized header {header!r}")


def load_records_file(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return read_records(fh)


def records_label(records, metadata, path: str) -> tuple[int, int]:
    if "setting" in metadata:
        return parse_setting(metadata["setting"])
    if records:
        return records[0].setting_label
    raise CliError(f"{path}: empty record file without a #setting metadata line")


def load_tables(paths) -> tuple[dict, dict]:
    """Read record or counts files into {label: table}; no format mixing."""
    kinds = {path: classify_input(path) for path in paths}
    if len(set(kinds.values())) > 1:
        raise CliError("mixed formats: pass either record files or counts files")
    tables: dict = {}
    metadata_by_label: dict = {}
    for path in paths:
        if kinds[path] == "counts":
            with open(path, "r", encoding="utf-8") as fh:
                for label, table in read_counts(fh).items():
                    if label in tables:
                        raise CliError(f"duplicate setting {label_key(label)} in {path}")
                    tables[label] = table
                    metadata_by_label[label] = {}
        else:
            records, trials, metadata = load_records_file(path)
            label = records_label(records, metadata, path)
            if label in tables:
                raise CliError(f"duplicate setting {label_key(label)} in {path}")
            tables[label] = count_coincidences(records, trials)
            metadata_by_label[label] = metadata
    return tables, metadata_by_label


def cmd_reproduce(args) -> int:
    path = data_dir_path("table_s2.counts")
    digest = sha256_file(path)
    if digest != TABLE_S2_SHA256:
        raise CliError(f"dataset corrupted: sha256 {digest} != {TABLE_S2_SHA256}")
    with open(path, "r", encoding="utf-8") as fh:
        tables = read_counts(fh)
    result, settings = bell_test(tables)
    only = parse_setting(args.setting) if args.setting else None
    print(f"dataset: {os.path.basename(path)} sha256={digest[:8]}")
    print_bell_block(result, settings, only)
    in_window = S_WINDOW[0] <= result.s_expected <= S_WINDOW[1]
    print(f"S window [{S_WINDOW[0]}, {S_WINDOW[1]}]: {'PASS' if in_window else 'FAIL'}")
    report = RunReport("reproduce", None, settings_dict(settings),
                       chsh_dict(result), {}, {},
                       provenance_dict(inputs=[path]))
    write_report(args, report)
    return EXIT_OK if in_window else EXIT_OUT_OF_RANGE


def simulation_plan(args, config) -> list[tuple[tuple[int, int], PhaseSetting, str]]:
    """(label, setting, filename) rows; stream index is position in this list."""
    by_label = {s.label: s for s in chsh_settings(config)}
    suffix = "records" if args.format == "records" else "counts"
    if args.sweep is not None:
        if args.sweep < 1:
            raise CliError("--sweep needs at least one point")
        plan = []
        for k in range(args.sweep):
            phi_r = 2.0 * np.pi * k / args.sweep
            setting = PhaseSetting(0.0, phi_r, label=(0, k + 1))
            plan.append((setting.label, setting, f"sweep_{k:02d}.{suffix}"))
        return plan
    labels = ([parse_setting(s) for s in args.setting]
              if args.setting else list(CHSH_LABELS))
    plan = []
    for label in labels:
        if label not in by_label:
            raise CliError(f"unknown setting {label_key(label)}; "
                           f"choose from {[label_key(l) for l in CHSH_LABELS]}")
        plan.append((label, by_label[label], f"setting_{label[0]}{label[1]}.{suffix}"))
    return plan


def cmd_simulate(args) -> int:
    if args.trials is None:
        raise CliError("simulate requires --trials")
    if args.trials < 0:
        raise CliError("--trials must be >= 0")
    config = load_config(args.config)
    plan = simulation_plan(args, config)
    os.makedirs(args.out, exist_ok=True)
    for stream, (label, setting, filename) in enumerate(plan):
        dist = build_outcome_distribution(config, setting)
        seed = SeedSpec(args.seed, stream)
        path = os.path.join(args.out, filename)
        if args.format == "records":
            metadata = {"setting": label_key(label),
                        "phi_b": repr(setting.phi_b), "phi_r": repr(setting.phi_r),
                        "seed": str(args.seed), "stream": str(stream)}
            buf = io.StringIO()
            rows = write_records(buf, sample_records(dist, args.trials, seed),
                                 args.trials, metadata)
            atomic_write(path, buf.getvalue())
        else:
            counts = sample_counts(dist, args.trials, seed)
            table = table_from_pattern_counts(counts, args.trials)
            rows = 1
            buf = io.StringIO()
            write_counts(buf, {label: table})
            atomic_write(path, buf.getvalue())
        print(f"wrote {path} ({rows} rows, {args.trials} trials, "
              f"seed {args.seed}/{stream})")
    return EXIT_OK


def analyze_chsh(args, paths) -> tuple[RunReport, int]:
    tables, _ = load_tables(paths)
    extra = [lb for lb in tables if lb not in CHSH_LABELS]
    if extra:
        raise CliError(f"unexpected settings for chsh mode: "
                       f"{[label_key(lb) for lb in extra]}")
    result, settings = bell_test(tables)
    print_bell_block(result, settings)
    report = RunReport("analyze", None, settings_dict(settings), chsh_dict(result),
                       {}, {"mode": "chsh"}, provenance_dict(inputs=paths))
    return report, EXIT_OK


def analyze_sweep(args, paths) -> tuple[RunReport, int]:
    points = []
    phi_bs = set()
    for path in paths:
        if classify_input(path) != "records":
            raise CliError("sweep mode needs record files with phase metadata")
        records, trials, metadata = load_records_file(path)
        if "phi_r" not in metadata:
            raise CliError(f"{path}: missing #phi_r metadata")
        phi_r = float(metadata["phi_r"])
        phi_bs.add(float(metadata.get("phi_b", 0.0)))
        table = count_coincidences(records, trials)
        e = correlation_coefficient(table)
        # plug-in binomial error on E, floored at the counting resolution
        sigma = max(np.sqrt(max(1.0 - e * e, 0.0) / table.coincidences),
                    1.0 / table.coincidences)
        points.append((phi_r, e, float(sigma)))
    if len(phi_bs) > 1:
        raise CliError(f"sweep files disagree on phi_b: {sorted(phi_bs)}")
    fit = fit_visibility(sorted(points), phi_b=phi_bs.pop() if phi_bs else 0.0)
    print(f"points: {len(points)}")
    print(f"V = {fit.params['V']:.6f} +- {fit.uncertainty['V']:.6f}")
    print(f"phi0 = {fit.params['phi0']:.6f} +- {fit.uncertainty['phi0']:.6f} rad")
    report = RunReport("analyze", None, {}, None, {"visibility": fit_dict(fit)},
                       {"mode": "sweep", "points": [list(p) for p in sorted(points)]},
                       provenance_dict(inputs=paths))
    return report, EXIT_OK


def analyze_g2(args, paths) -> tuple[RunReport, int]:
    if len(paths) != 1:
        raise CliError("g2 mode takes exactly one record file")
    if classify_input(paths[0]) != "records":
        raise CliError("g2 mode needs a record file")
    records, trials, _ = load_records_file(paths[0])
    totals = count_clicks(records, trials)
    xc = cross_correlation(trials, totals.blue_any, totals.red_any, totals.both_any)
    visibility = predicted_visibility(xc.g2)
    print(f"trials: {trials}")
    print(f"blue clicks: {totals.blue_any}")
    print(f"red clicks: {totals.red_any}")
    print(f"coincidences: {totals.both_any}")
    print(f"g2 = {xc.g2:.4f}")
    print(f"predicted visibility = {visibility:.4f}")
    extras = {"mode": "g2", "g2": xc.g2, "c_b": xc.c_b, "c_r": xc.c_r,
              "coincidences": xc.coincidences, "trials": trials,
              "predicted_visibility": visibility}
    return RunReport("analyze", None, {}, None, {}, extras,
                     provenance_dict(inputs=paths)), EXIT_OK


def analyze_thermometry(args, paths) -> tuple[RunReport, int]:
    if len(paths) != 1:
        raise CliError("thermometry mode takes exactly one record file")
    if classify_input(paths[0]) != "records":
        raise CliError("thermometry mode needs a record file")
    records, trials, _ = load_records_file(paths[0])
    totals = count_clicks(records, trials)
    extras = {"mode": "thermometry", "trials": trials}
    print(f"trials: {trials}")
    for det, c_b, c_r in ((1, totals.blue_1, totals.red_1),
                          (2, totals.blue_2, totals.red_2)):
        occupancy = sideband_occupancy(c_b, c_r)
        print(f"detector {det}: C_b={c_b} C_r={c_r} n={occupancy:.4f}")
        extras[f"occupancy_{det}"] = occupancy
        extras[f"c_b_{det}"], extras[f"c_r_{det}"] = c_b, c_r
    return RunReport("analyze", None, {}, None, {}, extras,
                     provenance_dict(inputs=paths)), EXIT_OK


def cmd_analyze(args) -> int:
    handler = {"chsh": analyze_chsh, "sweep": analyze_sweep,
               "g2": analyze_g2, "thermometry": analyze_thermometry}[args.mode]
    report, code = handler(args, args.paths)
    write_report(args, report)
    return code


def read_points(path: str) -> tuple[list, dict]:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    with fh:
        header = fh.readline().rstrip("\n")
        if header != POINTS_HEADER:
            raise CliError(f"{path}: expected header {POINTS_HEADER!r}, got {header!r}")
        points = []
        metadata = {}
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition("=")
                if sep:
                    metadata[key] = value
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CliError(f"{path} line {lineno}: expected x,y,sigma")
            try:
                points.append(tuple(float(x) for x in parts))
            except ValueError:
                raise CliError(f"{path} line {lineno}: non-numeric field") from None
    if not points:
        raise CliError(f"{path}: no data rows")
    return points, metadata


def cmd_fit(args) -> int:
    path = args.path
    if path is None:
        if args.model != "heating":
            raise CliError("fit visibility requires a points file")
        path = data_dir_path("heating_a.points")
    points, metadata = read_points(path)
    if args.model == "visibility":
        fit = fit_visibility(points, phi_b=float(metadata.get("phi_b", 0.0)))
    else:
        fit = fit_heating(points, n_init_fixed=args.n_init)
    print(f"model: {args.model}")
    for key in fit.params:
        print(f"{key} = {fit.params[key]:.6f} +- {fit.uncertainty[key]:.6f}")
    print(f"residual norm: {fit.residual_norm:.6g}")
    state = "yes" if fit.converged else "NO"
    print(f"converged: {state} ({fit.iterations} iterations)")
    report = RunReport("fit", None, {}, None, {args.model: fit_dict(fit)},
                       {"points": [list(p) for p in points]},
                       provenance_dict(inputs=[path]))
    write_report(args, report)
    return EXIT_OK if fit.converged else EXIT_OUT_OF_RANGE


class Parser(argparse.ArgumentParser):
    """argparse exits usage errors with code 2; remap them to the error code."""

    def error(self, message):
        raise CliError(message)


def build_parser() -> Parser:
    parser = Parser(prog="optobell",
                    description="Bell-test simulation and click-statistics analysis")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("reproduce", help="analyze the bundled published dataset")
    p.add_argument("--setting", help="print only this setting's row, e.g. 2,2")
    p.add_argument("--out", help="write a JSON run report")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("simulate", help="sample click datasets from the model")
    p.add_argument("--config", help="TOML config path (default: packaged calibration)")
    p.add_argument("--trials", type=int, help="trials per setting")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--setting", action="append",
                   help="CHSH setting i,j (repeatable; default all four)")
    p.add_argument("--sweep", type=int,
                   help="instead of CHSH settings, N red-phase points over 2 pi")
    p.add_argument("--format", choices=("records", "counts"), default="records")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="run estimators over click datasets")
    p.add_argument("--mode", required=True,
                   choices=("chsh", "sweep", "g2", "thermometry"))
    p.add_argument("--out", help="write a JSON run report")
    p.add_argument("paths", nargs="+", help="input record/counts files")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="fit a model to a points file")
    p.add_argument("--model", required=True, choices=("visibility", "heating"))
    p.add_argument("--n-init", type=float, default=None,
                   help="fix the heating baseline occupancy")
    p.add_argument("--out", help="write a JSON run report")
    p.add_argument("path", nargs="?", help="points file (heating: bundled default)")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "simulate" and args.sweep and args.setting:
            raise CliError("--sweep and --setting are mutually exclusive")
        return args.func(args)
    except (CliError, ConfigError, SamplerError, AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
