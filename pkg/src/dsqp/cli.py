"""Command-line runner: load a library problem, solve it, write traces.

Outputs (in ``--out-dir``):

``trace_outer.tsv``
    One row per outer iterate ``k = 0..K`` with the columns of
    :data:`OUTER_COLUMNS`. The last row holds the final residual and no
    inner loop.
``trace_inner.tsv``
    One row per inner iteration with the columns of :data:`INNER_COLUMNS`.
``summary.json``
    Status, exit code, configuration, iteration counts, communication
    statistics, rate report and, with ``--compare``, the distance to the
    exact-SQP limit.

Exit codes: 0 converged, 2 inner stall, 3 outer limit, 4 configuration
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .driver import (
    CONVERGED,
    INNER_STALL,
    OUTER_LIMIT,
    SCHEDULES,
    SqpConfig,
    baseline_sqp,
    error_sequence,
    estimate_rate,
    run_dsqp,
)
from .errors import ConfigError, DsqpError
from .nlp_model import PrimalDualPoint
from .problems import PROBLEM_IDS, RECOMMENDED_RHO, load_problem

_log = logging.getLogger(__name__)

EXIT_CODES = {CONVERGED: 0, INNER_STALL: 2, OUTER_LIMIT: 3}
EXIT_CONFIG = 4
EXIT_OTHER = 1

OUTER_COLUMNS = (
    "k", "F_norm", "Ftilde_norm", "eta", "inner_iterations",
    "active_set_changes", "cumulative_floats", "cumulative_inner", "stalled",
)
INNER_COLUMNS = (
    "k", "l", "criterion_max", "criteria", "flags",
    "primal_residual", "dual_residual", "active_set_changes", "floats",
)

RUN_KEYS = ("problem", "init", "x0", "out_dir", "seed", "mode")
MODES = ("dsqp", "baseline", "compare")
BASELINE_EPS = 1e-12


def _parse_value(key, raw, types):
    kind = types.get(key, str)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


_CONFIG_TYPES = {
    "eps": float, "eta0": float, "schedule_param": float, "rho": float,
    "delta": float, "k_max": int, "l_max": int, "inner_abs_tol": float,
    "kkt_tol": float, "seed": int,
}


def read_spec_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment.

    Keys are the :class:`~dsqp.driver.SqpConfig` fields plus ``problem``,
    ``init`` (``flat`` or ``given``), ``x0`` (comma-separated, with
    ``init = given``), ``out_dir``, ``seed`` and ``mode`` (``dsqp``,
    ``baseline`` or ``compare``). Unknown keys raise :class:`ConfigError`.
    """
    allowed = set(SqpConfig.field_names()) | set(RUN_KEYS)
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw, _CONFIG_TYPES)
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="dsqp", description="Decentralized SQP benchmark runner")
    ap.add_argument("--problem", choices=PROBLEM_IDS)
    ap.add_argument("--config", help="key = value spec file")
    ap.add_argument("--schedule", choices=SCHEDULES)
    ap.add_argument("--schedule-param", type=float, dest="schedule_param")
    ap.add_argument("--rho", type=float)
    ap.add_argument("--eta0", type=float)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--k-max", type=int, dest="k_max")
    ap.add_argument("--l-max", type=int, dest="l_max")
    ap.add_argument("--out-dir", dest="out_dir")
    ap.add_argument("--seed", type=int)
    mode = ap.add_mutually_exclusive_group()
    mode.add_argument("--baseline", action="store_const", const="baseline", dest="mode",
                      help="run the exact SQP instead of d-SQP")
    mode.add_argument("--compare", action="store_const", const="compare", dest="mode",
                      help="run both and report the distance between the limits")
    return ap


def resolve_settings(args):
    """Merge the spec file and the flags (flags win) into run settings."""
    settings = read_spec_file(args.config) if args.config else {}
    for key, val in vars(args).items():
        if key != "config" and val is not None:
            settings[key] = val
    settings.setdefault("problem", "P1")
    settings.setdefault("init", "flat")
    settings.setdefault("out_dir", "dsqp_out")
    settings.setdefault("seed", 0)
    settings.setdefault("mode", "dsqp")
    if settings["problem"] not in PROBLEM_IDS:
        raise ConfigError(f"unknown problem id {settings['problem']!r}")
    if settings["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if settings["init"] not in ("flat", "given"):
        raise ConfigError("init must be 'flat' or 'given'")
    settings.setdefault("rho", RECOMMENDED_RHO[settings["problem"]])
    cfg = {k: settings[k] for k in SqpConfig.field_names() if k in settings}
    settings["config"] = SqpConfig(**cfg).validate()
    return settings


def _start_point(problem, p0, settings):
    if settings["init"] == "flat":
        return p0
    raw = settings.get("x0")
    if raw is None:
        raise ConfigError("init = given needs x0")
    values = np.array([float(v) for v in str(raw).split(",")])
    if values.size != problem.n:
        raise ConfigError(f"x0 has {values.size} entries, problem has {problem.n} variables")
    return PrimalDualPoint.zeros_like(problem, problem.split(values))


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_traces(out_dir, result):
    out_dir = Path(out_dir)
    lines = ["\t".join(OUTER_COLUMNS)]
    for row in result.trace:
        d = asdict(row)
        lines.append("\t".join(_fmt(d[c]) for c in OUTER_COLUMNS))
    (out_dir / "trace_outer.tsv").write_text("\n".join(lines) + "\n")

    lines = ["\t".join(INNER_COLUMNS)]
    for k, inner in enumerate(result.inner_trace):
        for rec in inner:
            crit = max(rec.criteria) if rec.criteria else float("nan")
            lines.append("\t".join([
                str(k), str(rec.l), _fmt(crit),
                ",".join(_fmt(c) for c in rec.criteria),
                ",".join(str(int(f)) for f in rec.flags),
                _fmt(rec.primal_residual), _fmt(rec.dual_residual),
                str(rec.active_set_changes), str(rec.floats),
            ]))
    (out_dir / "trace_inner.tsv").write_text("\n".join(lines) + "\n")


def read_trace(path):
    """Parse a trace file back into a list of dicts of strings."""
    rows = Path(path).read_text().splitlines()
    header = rows[0].split("\t")
    return [dict(zip(header, r.split("\t"))) for r in rows[1:]]


def _rate_dict(rep):
    return {
        "classification": rep.classification,
        "usable_points": rep.usable,
        "linear_ratios": rep.linear_ratios,
        "quadratic_factors": rep.quadratic_factors,
        "slope": None if np.isnan(rep.slope) else rep.slope,
    }


def execute(settings):
    """Run one configuration; returns ``(summary, result)``."""
    problem, p0 = load_problem(settings["problem"])
    start = _start_point(problem, p0, settings)
    cfg = settings["config"]
    mode = settings["mode"]
    # high-accuracy exact SQP from the same start: reference for the rate report
    ref = baseline_sqp(problem, start, eps=BASELINE_EPS, k_max=cfg.k_max, delta=cfg.delta)
    if mode == "baseline":
        result = baseline_sqp(problem, start, eps=cfg.eps, k_max=cfg.k_max, delta=cfg.delta, kkt_tol=cfg.kkt_tol)
    else:
        result = run_dsqp(problem, start, cfg)

    summary = {
        "problem": settings["problem"],
        "mode": mode,
        "seed": settings["seed"],
        "init": settings["init"],
        "config": asdict(cfg),
        "status": result.status,
        "message": result.message,
        "outer_iterations": result.outer_iterations,
        "inner_iterations": result.inner_iterations,
        "final_F_norm": result.final_residual,
        "x_final": [float(v) for v in result.point.x_vector],
        "comm": result.comm.to_dict(),
    }
    if ref.converged:
        summary["rate"] = _rate_dict(estimate_rate(error_sequence(result.iterates, ref.point)))
        if mode == "compare":
            diff = np.max(np.abs(result.point.x_vector - ref.point.x_vector), initial=0.0)
            summary["agreement"] = {
                "baseline_status": ref.status,
                "baseline_outer_iterations": ref.outer_iterations,
                "x_diff_inf": float(diff),
            }
    else:
        summary["rate"] = None
        if mode == "compare":
            summary["agreement"] = {"baseline_status": ref.status, "x_diff_inf": None}
    return summary, result


def _write_summary(out_dir, summary):
    path = Path(out_dir) / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_cli(argv=None):
    """Parse ``argv``, run, write outputs; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out_dir or "dsqp_out")
    try:
        settings = resolve_settings(args)
        out_dir = Path(settings["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        summary, result = execute(settings)
    except ConfigError as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_summary(out_dir, {"status": "config-error", "exit_code": EXIT_CONFIG, "diagnostic": str(exc)})
        print(f"dsqp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DsqpError, OSError) as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_summary(out_dir, {"status": "error", "exit_code": EXIT_OTHER, "diagnostic": str(exc)})
        print(f"dsqp: {exc}", file=sys.stderr)
        return EXIT_OTHER

    code = EXIT_CODES.get(result.status, EXIT_OTHER)
    summary["exit_code"] = code
    if code:
        summary["diagnostic"] = result.message or result.status
    write_traces(out_dir, result)
    _write_summary(out_dir, summary)
    print(f"{settings['problem']}: {result.status} after {result.outer_iterations} outer / "
          f"{result.inner_iterations} inner iterations, ||F|| = {result.final_residual:.3e}")
    return code


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
