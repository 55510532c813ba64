"""Command-line surface: configured solves, transform dumps, basis exports,
and diagnostics report bundles.

Configuration is a flat key = value text file ('#' starts a comment); every
key has a default, the effective configuration is echoed verbatim into each
output's metadata, and artifacts carry a 12-hex config hash in their file
names. The hash covers the problem-defining keys only: `out` and `threads`
describe where and how to run, not what is computed.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(the failing stage is named on standard error).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .diagnostics import (
    Report,
    compress,
    conditioning_table,
    config_hash,
    convergence_table,
    decay_profile,
    fit_log_slope,
    coefficient_spectrum,
)
from .errors import InvalidArgumentError, NumericalError
from .gamblet_exact import exact_solve
from .gamblet_fast import fast_solve, fast_transform, make_schedule
from .grid_fem import (
    CoefficientField,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_grid,
    coefficient_checkerboard,
    coefficient_constant,
    coefficient_example1,
    energy_norm,
    example_load,
    l2_norm,
    read_field_csv,
    write_field_csv,
    write_pgm,
)
from .hierarchy import build_hierarchy
from .oracle import dense_solve
from .sparse_core import mm_write

__all__ = ["DEFAULTS", "load_config", "parse_config_text", "typed_config",
           "run_tag", "cmd_solve", "cmd_transform", "cmd_bases", "cmd_report",
           "main"]

DEFAULTS = {
    "q": "4",
    "coefficient": "example1",
    "load": "example1",
    "pipeline": "exact",
    "epsilon": "1e-3",
    "c_rho": "",
    "uniform_rho": "",
    "w_variant": "orthonormal",
    "tol_mass": "1e-10",
    "tol_subband": "1e-10",
    "level_q_init": "mass_inverse",
    "g_mode": "nodal",
    "compare_exact": "false",
    "keep_fractions": "0.01,0.02,0.05,0.1,0.2,0.5,1.0",
    "threads": "0",
    "out": "gamblet-run",
}

# execution-environment keys; excluded from the config hash so the same
# problem keeps the same tag wherever and however it runs
_UNHASHED = ("out", "threads")

# matrices above this entry count are skipped by `transform` dumps
DUMP_NNZ_CAP = 2_000_000

_DENSE_REFERENCE_MAX_Q = 6


def parse_config_text(text):
    """key = value lines into a dict; unknown keys and malformed lines fail."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise InvalidArgumentError(f"config line {lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def load_config(path=None, out_flag=None, threads_flag=None):
    """Effective raw config: defaults, then file, then command-line overrides."""
    raw = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidArgumentError(f"cannot read config {path}: {exc}")
        raw.update(parse_config_text(text))
    if out_flag is not None:
        raw["out"] = out_flag
    if threads_flag is not None:
        raw["threads"] = str(threads_flag)
    return raw


def run_tag(raw):
    """Config hash over the problem-defining keys."""
    return config_hash({k: v for k, v in raw.items() if k not in _UNHASHED})


def _parse_float(raw, key, cond=lambda v: True, what=""):
    try:
        value = float(raw[key])
    except ValueError:
        raise InvalidArgumentError(f"config {key}: not a number: {raw[key]!r}")
    if not cond(value):
        raise InvalidArgumentError(f"config {key}: {what}, got {raw[key]!r}")
    return value


def _parse_bool(raw, key):
    value = raw[key].strip().lower()
    if value in ("true", "yes", "1"):
        return True
    if value in ("false", "no", "0"):
        return False
    raise InvalidArgumentError(f"config {key}: expected true/false, got {raw[key]!r}")


def typed_config(raw):
    """Validate and type the raw config; InvalidArgumentError on any bad value."""
    cfg = {}
    try:
        cfg["q"] = int(raw["q"])
    except ValueError:
        raise InvalidArgumentError(f"config q: not an integer: {raw['q']!r}")
    cfg["coefficient"] = raw["coefficient"].strip()
    cfg["load"] = raw["load"].strip()
    pipeline = raw["pipeline"].strip()
    if pipeline not in ("exact", "fast"):
        raise InvalidArgumentError(f"config pipeline: expected exact|fast, got {pipeline!r}")
    cfg["pipeline"] = pipeline
    cfg["epsilon"] = _parse_float(raw, "epsilon", lambda v: 0.0 < v < 1.0,
                                  "must be in (0, 1)")
    cfg["c_rho"] = (None if raw["c_rho"].strip() == "" else
                    _parse_float(raw, "c_rho", lambda v: v > 0.0, "must be > 0"))
    if raw["uniform_rho"].strip() == "":
        cfg["uniform_rho"] = None
    else:
        try:
            cfg["uniform_rho"] = int(raw["uniform_rho"])
        except ValueError:
            raise InvalidArgumentError(
                f"config uniform_rho: not an integer: {raw['uniform_rho']!r}")
        if cfg["uniform_rho"] < 1:
            raise InvalidArgumentError("config uniform_rho: must be >= 1")
    w_variant = raw["w_variant"].strip()
    if w_variant not in ("chain", "orthonormal"):
        raise InvalidArgumentError(
            f"config w_variant: expected chain|orthonormal, got {w_variant!r}")
    cfg["w_variant"] = w_variant
    cfg["tol_mass"] = _parse_float(raw, "tol_mass", lambda v: v > 0.0, "must be > 0")
    cfg["tol_subband"] = _parse_float(raw, "tol_subband", lambda v: v > 0.0,
                                      "must be > 0")
    init = raw["level_q_init"].strip()
    if init not in ("mass_inverse", "nodal"):
        raise InvalidArgumentError(
            f"config level_q_init: expected mass_inverse|nodal, got {init!r}")
    cfg["level_q_init"] = init
    g_mode = raw["g_mode"].strip()
    if g_mode not in ("nodal", "measured"):
        raise InvalidArgumentError(
            f"config g_mode: expected nodal|measured, got {g_mode!r}")
    cfg["g_mode"] = g_mode
    cfg["compare_exact"] = _parse_bool(raw, "compare_exact")
    fractions = []
    for part in raw["keep_fractions"].split(","):
        part = part.strip()
        if not part:
            continue
        try:
            f = float(part)
        except ValueError:
            raise InvalidArgumentError(f"config keep_fractions: not a number: {part!r}")
        if not 0.0 < f <= 1.0:
            raise InvalidArgumentError(
                f"config keep_fractions: values must be in (0, 1], got {part}")
        fractions.append(f)
    if not fractions:
        raise InvalidArgumentError("config keep_fractions: list is empty")
    cfg["keep_fractions"] = fractions
    try:
        cfg["threads"] = int(raw["threads"])
    except ValueError:
        raise InvalidArgumentError(f"config threads: not an integer: {raw['threads']!r}")
    if cfg["threads"] < 0:
        raise InvalidArgumentError("config threads: must be >= 0")
    cfg["out"] = raw["out"]
    return cfg


def _coefficient(cfg, grid):
    spec = cfg["coefficient"]
    if spec == "example1":
        return coefficient_example1(grid)
    if spec.startswith("constant:"):
        return coefficient_constant(grid, float(spec.split(":", 1)[1]))
    if spec.startswith("checkerboard:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise InvalidArgumentError(
                f"coefficient checkerboard needs contrast and seed, got {spec!r}")
        return coefficient_checkerboard(grid, float(parts[1]), int(parts[2]))
    if spec.startswith("csv:"):
        path = spec.split(":", 1)[1]
        try:
            values = read_field_csv(path)
        except OSError as exc:
            raise InvalidArgumentError(f"cannot read coefficient csv {path}: {exc}")
        m = grid.n + 1
        if values.shape != (m, m):
            raise InvalidArgumentError(
                f"coefficient csv must be {m}x{m} cell values, got {values.shape}")
        return CoefficientField(grid=grid, values=values.ravel(), label=spec)
    raise InvalidArgumentError(f"unknown coefficient spec {spec!r}")


def _load_values(cfg, grid):
    spec = cfg["load"]
    if spec == "example1":
        return example_load(grid)
    if spec.startswith("nodal-constant:"):
        return np.full(grid.num_nodes, float(spec.split(":", 1)[1]))
    if spec.startswith("csv:"):
        path = spec.split(":", 1)[1]
        try:
            values = read_field_csv(path)
        except OSError as exc:
            raise InvalidArgumentError(f"cannot read load csv {path}: {exc}")
        if values.shape != (grid.n, grid.n):
            raise InvalidArgumentError(
                f"load csv must be {grid.n}x{grid.n} nodal values, got {values.shape}")
        return values.ravel()
    raise InvalidArgumentError(f"unknown load spec {spec!r}")


def _build_problem(cfg, with_load=True):
    grid = build_grid(cfg["q"])
    coefficient = _coefficient(cfg, grid)
    M = assemble_mass(grid)
    A = assemble_stiffness(grid, coefficient)
    tree = build_hierarchy(grid)
    load = assemble_load(grid, _load_values(cfg, grid), mass=M) if with_load else None
    return grid, coefficient, M, A, tree, load


@contextmanager
def _stage(name):
    """Tag numerical failures with the pipeline stage that raised them."""
    try:
        yield
    except NumericalError as exc:
        raise NumericalError(f"stage {name}: {exc}") from exc


def _limit_threads(cfg):
    """Best-effort BLAS thread cap; 0 leaves library defaults in place."""
    if cfg["threads"] <= 0:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(cfg["threads"])
    except ImportError:
        pass


def _grid_field(grid, values):
    return np.asarray(values, dtype=float).reshape(grid.n, grid.n)


def _record_rows(records):
    return [
        {
            "level": r.level,
            "kind": r.kind,
            "size": r.size,
            "columns": r.columns,
            "tol": r.tol,
            "max_iterations": r.max_iterations,
        }
        for r in records
    ]


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _existing_hashes(out_dir):
    found = set()
    for path in sorted(Path(out_dir).glob("*.json")):
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            continue
        tag = payload.get("config_hash")
        if tag:
            found.add(tag)
    return found


def cmd_solve(raw):
    cfg = typed_config(raw)
    _limit_threads(cfg)
    tag = run_tag(raw)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("assembly"):
        grid, coefficient, M, A, tree, load = _build_problem(cfg)

    t0 = time.perf_counter()
    summary = {
        "config_hash": tag,
        "config": dict(sorted(raw.items())),
        "pipeline": cfg["pipeline"],
        "q": cfg["q"],
    }
    if cfg["pipeline"] == "exact":
        with _stage("exact transform/solve"):
            solution, levels = exact_solve(
                M, A, load, tree, w_variant=cfg["w_variant"],
                tol_mass=cfg["tol_mass"], tol_subband=cfg["tol_subband"],
                level_q_init=cfg["level_q_init"])
    else:
        with _stage("fast transform/solve"):
            result = fast_solve(M, A, load, tree, cfg["epsilon"],
                                c_rho=cfg["c_rho"], uniform_rho=cfg["uniform_rho"],
                                w_variant=cfg["w_variant"], g_mode=cfg["g_mode"])
        solution = result.solution
        summary["complexity"] = result.report

    residual = float(np.linalg.norm(A @ solution.u - load.b))
    bnorm = float(np.linalg.norm(load.b))
    summary["residual"] = residual / bnorm if bnorm > 0.0 else residual
    summary["records"] = _record_rows(solution.records)

    if cfg["compare_exact"] and cfg["pipeline"] == "fast":
        with _stage("exact comparison"):
            exact_sol, _ = exact_solve(
                M, A, load, tree, w_variant=cfg["w_variant"],
                tol_mass=cfg["tol_mass"], tol_subband=cfg["tol_subband"],
                level_q_init=cfg["level_q_init"])
        diff = energy_norm(A, solution.u - exact_sol.u)
        ref = energy_norm(A, exact_sol.u)
        summary["exact_comparison"] = {
            "rel_a_norm_difference": float(diff / ref) if ref > 0.0 else float(diff),
            "epsilon": cfg["epsilon"],
        }

    created = []
    path = out_dir / f"u_{tag}.csv"
    write_field_csv(path, _grid_field(grid, solution.u), comment=f"config {tag}")
    created.append(path.name)
    for k in sorted(solution.increments):
        path = out_dir / f"increment_{k:02d}_{tag}.csv"
        write_field_csv(path, _grid_field(grid, solution.increments[k]),
                        comment=f"config {tag}")
        created.append(path.name)
    summary["seconds"] = round(time.perf_counter() - t0, 3)
    summary["outputs"] = created
    _write_json(out_dir / f"summary_{tag}.json", summary)
    return 0


def _transform_levels(cfg, M, A, tree, load):
    """Level data for basis-only commands; the exact route runs on a zero load."""
    if cfg["pipeline"] == "fast":
        schedule = make_schedule(cfg["epsilon"], tree.q, c_rho=cfg["c_rho"],
                                 uniform_rho=cfg["uniform_rho"])
        levels, _ = fast_transform(M, A, tree, schedule, w_variant=cfg["w_variant"])
        return levels, schedule
    zero = np.zeros(A.shape[0])
    _, levels = exact_solve(M, A, zero, tree, w_variant=cfg["w_variant"],
                            tol_mass=cfg["tol_mass"], tol_subband=cfg["tol_subband"],
                            level_q_init=cfg["level_q_init"])
    return levels, None


def cmd_transform(raw):
    cfg = typed_config(raw)
    _limit_threads(cfg)
    tag = run_tag(raw)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("assembly"):
        _, _, M, A, tree, _ = _build_problem(cfg, with_load=False)
    with _stage(f"{cfg['pipeline']} transform"):
        levels, schedule = _transform_levels(cfg, M, A, tree, None)

    created = []
    skipped = []

    def _dump(name, mat):
        nnz = mat.nnz if hasattr(mat, "nnz") else int(np.count_nonzero(mat))
        if nnz > DUMP_NNZ_CAP:
            skipped.append({"name": name, "nnz": int(nnz)})
            return
        path = out_dir / f"{name}_{tag}.mtx"
        mm_write(path, mat, comment=f"config {tag}")
        created.append(path.name)

    for k in sorted(levels):
        lvl = levels[k]
        _dump(f"A_{k:02d}", lvl.stiffness)
        _dump(f"psi_{k:02d}", lvl.psi)
        if lvl.subband is not None:
            _dump(f"B_{k:02d}", lvl.subband)
        if lvl.restriction is not None:
            _dump(f"R_{k - 1:02d}_{k:02d}", lvl.restriction)

    summary = {
        "config_hash": tag,
        "config": dict(sorted(raw.items())),
        "pipeline": cfg["pipeline"],
        "q": cfg["q"],
        "outputs": created,
        "skipped_over_nnz_cap": skipped,
    }
    if schedule is not None:
        summary["schedule"] = {
            "epsilon": schedule.epsilon,
            "c_rho": schedule.c_rho,
            "radii": list(schedule.radii),
        }
    _write_json(out_dir / f"transform_{tag}.json", summary)
    return 0


def cmd_bases(raw, level, indices):
    cfg = typed_config(raw)
    _limit_threads(cfg)
    tag = run_tag(raw)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    with _stage("assembly"):
        grid, _, M, A, tree, _ = _build_problem(cfg, with_load=False)
    if not 1 <= level <= tree.q:
        raise InvalidArgumentError(f"level {level} outside 1..{tree.q}")
    n_agg = tree.size(level)
    n_sub = tree.subband_size(level) if level >= 2 else 0
    for i in indices:
        if not 0 <= i < n_agg:
            raise InvalidArgumentError(
                f"basis index {i} outside 0..{n_agg - 1} at level {level}")

    with _stage(f"{cfg['pipeline']} transform"):
        levels, _ = _transform_levels(cfg, M, A, tree, None)

    lvl = levels[level]
    created = []
    W = lvl.null_w if level >= 2 else None
    if W is None and level >= 2:
        W = tree.null_basis(level, cfg["w_variant"])
    for i in indices:
        row = lvl.psi[[i]]
        row = row.toarray().ravel() if hasattr(row, "toarray") else np.asarray(row).ravel()
        field = _grid_field(grid, row)
        base = f"psi_k{level}_i{i:05d}_{tag}"
        write_field_csv(out_dir / f"{base}.csv", field, comment=f"config {tag}")
        write_pgm(out_dir / f"{base}.pgm", np.abs(field), log_scale=True,
                  comment=f"config {tag}")
        created.extend([f"{base}.csv", f"{base}.pgm"])
        if level >= 2 and i < n_sub:
            chi = (W[[i]] @ lvl.psi)
            chi = chi.toarray().ravel() if hasattr(chi, "toarray") else np.asarray(chi).ravel()
            field = _grid_field(grid, chi)
            base = f"chi_k{level}_i{i:05d}_{tag}"
            write_field_csv(out_dir / f"{base}.csv", field, comment=f"config {tag}")
            write_pgm(out_dir / f"{base}.pgm", np.abs(field), log_scale=True,
                      comment=f"config {tag}")
            created.extend([f"{base}.csv", f"{base}.pgm"])

    _write_json(out_dir / f"bases_{tag}.json", {
        "config_hash": tag,
        "config": dict(sorted(raw.items())),
        "level": level,
        "indices": list(indices),
        "outputs": created,
    })
    return 0


def cmd_report(raw):
    cfg = typed_config(raw)
    _limit_threads(cfg)
    tag = run_tag(raw)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    other = _existing_hashes(out_dir) - {tag}
    if other:
        raise InvalidArgumentError(
            f"output directory {out_dir} already holds reports for config(s) "
            f"{sorted(other)}; refusing to mix hashes in one directory")

    with _stage("assembly"):
        grid, coefficient, M, A, tree, load = _build_problem(cfg)
    with _stage("exact transform/solve"):
        solution, levels = exact_solve(
            M, A, load, tree, w_variant=cfg["w_variant"],
            tol_mass=cfg["tol_mass"], tol_subband=cfg["tol_subband"],
            level_q_init=cfg["level_q_init"])

    hashed = {k: v for k, v in raw.items() if k not in _UNHASHED}
    report = Report(config=hashed)
    report.metadata["q"] = cfg["q"]
    report.metadata["coefficient"] = coefficient.label
    a_min = float(coefficient.values.min())
    a_max = float(coefficient.values.max())
    report.metadata["coefficient_min"] = a_min
    report.metadata["coefficient_max"] = a_max
    report.metadata["contrast"] = a_max / a_min

    with _stage("diagnostics"):
        if cfg["q"] <= _DENSE_REFERENCE_MAX_Q:
            u_ref = dense_solve(A.toarray(), load.b)
            rows = convergence_table(solution, u_ref, A, a_min,
                                     l2_norm(M, load.g_nodal))
            report.add_table("convergence",
                             ["level", "a_norm_error", "bound", "ratio", "relative"],
                             rows)

        named = [("A(1)", levels[1].stiffness)]
        named += [(f"B({k})", levels[k].subband) for k in range(2, tree.q + 1)]
        rows = conditioning_table(named)
        report.add_table("conditioning",
                         ["matrix", "size", "lambda_min", "lambda_max", "cond"], rows)

        decay_rows = []
        fit_rows = []
        for k in range(2, min(4, tree.q) + 1):
            side = tree.side(k)
            center_flat = (side // 2) * side + side // 2
            H_k = tree.h_level(k)
            center = ((side // 2 + 0.5) * H_k, (side // 2 + 0.5) * H_k)
            radii = np.arange(0, 9) * H_k
            row = np.asarray(levels[k].psi[[center_flat]]).ravel()
            fractions = decay_profile(grid, coefficient, row, center, radii)
            decay_rows += [(k, float(r), float(f)) for r, f in zip(radii, fractions)]
            fit_rows.append((k, fit_log_slope(radii, fractions)))
        report.add_table("decay", ["level", "radius", "energy_fraction"], decay_rows)
        report.add_table("decay_fits", ["level", "log_slope"], fit_rows)

        spectrum = coefficient_spectrum(solution, levels)
        spec_rows = [(k, i, float(v)) for k in sorted(spectrum)
                     for i, v in enumerate(spectrum[k])]
        report.add_table("spectrum", ["level", "index", "magnitude"], spec_rows)

        comp_rows = []
        for f in cfg["keep_fractions"]:
            _, rel = compress(solution, levels, A, f)
            comp_rows.append((f, rel))
        report.add_table("compression", ["keep_fraction", "rel_a_norm_error"],
                         comp_rows)

        report.add_raster("coefficient",
                          coefficient.values.reshape(grid.n + 1, grid.n + 1),
                          log_scale=True)
        report.add_raster("u", _grid_field(grid, solution.u))
        report.write(out_dir)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gamblets",
        description="Multiresolution solver for rough-coefficient elliptic problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory (overrides config key)")
        p.add_argument("--threads", type=int, help="BLAS thread cap (0 = auto)")

    _common(sub.add_parser("solve", help="run the configured pipeline, write u"))
    _common(sub.add_parser("transform",
                           help="bases only, no right-hand side; Matrix Market dumps"))
    p_bases = sub.add_parser("bases", help="export basis functions as CSV + PGM")
    _common(p_bases)
    p_bases.add_argument("--level", type=int, required=True)
    p_bases.add_argument("--indices", required=True,
                         help="comma-separated basis indices")
    _common(sub.add_parser("report", help="full diagnostics bundle"))

    args = parser.parse_args(argv)
    try:
        raw = load_config(args.config, out_flag=args.out, threads_flag=args.threads)
        if args.command == "solve":
            return cmd_solve(raw)
        if args.command == "transform":
            return cmd_transform(raw)
        if args.command == "bases":
            try:
                indices = [int(part) for part in args.indices.split(",") if part.strip()]
            except ValueError:
                raise InvalidArgumentError(f"bad --indices list: {args.indices!r}")
            if not indices:
                raise InvalidArgumentError("--indices list is empty")
            return cmd_bases(raw, args.level, indices)
        if args.command == "report":
            return cmd_report(raw)
        raise InvalidArgumentError(f"unknown command {args.command!r}")
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
