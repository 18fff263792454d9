"""Command-line front end.

    dobkit run          --config FILE [--out DIR] [--seed N]
    dobkit mc           --config FILE [--runs K]
    dobkit sweep-eta    --config FILE [--grid LOG_ETA ...]
    dobkit sweep-sigma  --config FILE [--grid LOG_SIGMA ...]
    dobkit sweep-markov --config FILE [--grid P ...]
    dobkit compare      --config FILE   (config lists >= 2 observers)

``--preset NAME`` may replace ``--config``.  Every file written is a pure
function of (config, seed) except ``timing.json``, which holds wall-clock
measurements.  Exit status: 0 ok, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .control import BoundInputs, ultimate_bound
from .errors import ConfigError, DobkitError
from .simlab import (
    SCHEMA_VERSION,
    TRACKING_COLUMNS,
    compare,
    load_config,
    monte_carlo,
    observer_label,
    preset_scenario,
    run_closed_loop,
    scenario_gains,
    table_rows,
    tracking_metrics,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SWEEP_ETA = [0.0, 1.0, 2.0, 3.0, 4.0, 40.0]
SWEEP_SIGMA = [round(-1.0 + 0.5 * i, 1) for i in range(13)]
SWEEP_MARKOV = [round(0.05 * i, 2) for i in range(1, 20)]


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def format_table(rows: list[dict]) -> str:
    """Aligned text table, columns in the order given."""
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[c for c in cols]] + [[f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(w) if j else v.ljust(w) for j, (v, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _load(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        scn = preset_scenario(args.preset)
        specs = [scn.observer]
    elif args.config:
        scn, specs = load_config(args.config)
    else:
        raise ConfigError("--config PATH or --preset NAME is required")
    if args.seed is not None:
        scn = scn.with_observer(scn.observer, seed=int(args.seed))
    return scn, specs


def _say(args, text):
    if not args.quiet:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    scn, _ = _load(args)
    out = Path(args.out)
    tr = run_closed_loop(scn)
    metrics = tracking_metrics(tr)
    le_bar = float(np.max(np.linalg.norm(tr.l_e, axis=1)))
    kappa = ultimate_bound(scenario_gains(scn), BoundInputs(le_bar, eps=0.01))
    summary = {
        "schema": SCHEMA_VERSION,
        "scenario": scn.to_dict(),
        "seed": scn.seed,
        "rows": len(tr),
        "rmse": {k: v.tolist() for k, v in metrics.items()},
        "l_e_max": le_bar,
        "kappa": kappa,
    }
    if tr.iters is not None:
        summary["iters_median"] = float(np.median(tr.iters[1:])) if len(tr) > 1 else 0.0
        summary["fp_diverged"] = tr.fp_diverged
    _write(out, "trace.csv", tr.to_csv())
    _write(out, "summary.json", _dump(summary))
    _write(out, "timing.json", _dump({"step_time_mean_s": float(np.mean(tr.step_time[1:] if len(tr) > 1 else tr.step_time))}))
    _say(args, f"{len(tr)} steps written to {out / 'trace.csv'}\n")
    return EXIT_OK


def _mc_args(args):
    return {"K": args.runs, "base_seed": args.seed, "workers": args.workers}


def cmd_mc(args) -> int:
    scn, _ = _load(args)
    out = Path(args.out)
    rep = monte_carlo(scn, **_mc_args(args))
    _write(out, "report.json", rep.to_json())
    rows = [{"k": k, **{f"bias_{i + 1}": float(b) for i, b in enumerate(rep.bias[k])},
             **{f"std_{i + 1}": float(s) for i, s in enumerate(rep.std[k])}} for k in range(rep.bias.shape[0])]
    _write(out, "bias_std.csv", _csv(rows))
    _write(out, "timing.json", _dump({"step_time_s": rep.step_time}))
    _say(args, format_table(table_rows([(observer_label(scn.observer), rep)])))
    return EXIT_OK


def _sweep(args, name, grid, make_spec) -> int:
    scn, _ = _load(args)
    out = Path(args.out)
    records, timing = [], []
    for value in grid:
        spec = make_spec(scn.observer, value)
        rep = monte_carlo(scn.with_observer(spec), **_mc_args(args))
        rec = {name: value, "observer": spec, "bias2_window": rep.bias2_window.tolist(),
               "var_window": rep.var_window.tolist(), "rmse": {k: v.tolist() for k, v in rep.rmse.items()},
               "snr_db": rep.snr_db.tolist(), "iters_median": rep.iters_median}
        records.append(rec)
        timing.append({name: value, "step_time_s": rep.step_time})
    summary = {"schema": SCHEMA_VERSION, "sweep": name, "grid": list(grid), "runs": args.runs,
               "scenario": scn.to_dict(), "records": records}
    _write(out, f"sweep_{name}.json", _dump(summary))
    flat = []
    for rec in records:
        row = {name: float(rec[name])}
        for i, v in enumerate(rec["bias2_window"]):
            row[f"bias2_{i + 1}"] = float(v)
        for i, v in enumerate(rec["var_window"]):
            row[f"var_{i + 1}"] = float(v)
        for key in TRACKING_COLUMNS:
            for i, v in enumerate(rec["rmse"][key]):
                row[f"rmse_{key}_{i + 1}"] = float(v)
        flat.append(row)
    _write(out, f"sweep_{name}.csv", _csv(flat))
    _write(out, "timing.json", _dump(timing))
    _say(args, format_table(flat))
    return EXIT_OK


def cmd_sweep_eta(args) -> int:
    grid = args.grid if args.grid else SWEEP_ETA

    def spec(base, v):
        return {"type": "ekf", "log_eta": v}

    return _sweep(args, "log_eta", grid, spec)


def cmd_sweep_sigma(args) -> int:
    grid = args.grid if args.grid else SWEEP_SIGMA

    def spec(base, v):
        s = dict(base) if base.get("type") == "mkc" else {"type": "mkc"}
        s.pop("label", None)
        s["sigma_d"] = math.exp(v)
        return s

    return _sweep(args, "log_sigma_d", grid, spec)


def cmd_sweep_markov(args) -> int:
    grid = args.grid if args.grid else SWEEP_MARKOV
    for p in grid:
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"Markov persistence {p} outside [0, 1]")

    def spec(base, p):
        s = dict(base) if base.get("type") == "imm" else {"type": "imm", "etas": [1.0, 20.0]}
        s.pop("label", None)
        s["markov"] = [[p, 1.0 - p], [1.0 - p, p]]
        return s

    return _sweep(args, "p", grid, spec)


def cmd_compare(args) -> int:
    scn, specs = _load(args)
    if len(specs) < 2:
        raise ConfigError(f"compare needs at least 2 observers, got {len(specs)}")
    out = Path(args.out)
    results = compare(scn, specs, args.runs, args.seed, args.workers)
    rows = table_rows(results)
    timing = [{"observer": r["observer"], "step_time_us": r["step_time_us"]} for r in rows]
    det_rows = [{k: v for k, v in r.items() if k != "step_time_us"} for r in rows]
    _write(out, "compare.csv", _csv(det_rows))
    _write(out, "compare.txt", format_table(det_rows))
    _write(out, "compare.json", _dump({"schema": SCHEMA_VERSION, "runs": args.runs, "scenario": scn.to_dict(),
                                       "observers": specs, "rows": det_rows}))
    _write(out, "timing.json", _dump(timing))
    _say(args, format_table(rows))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "mc": cmd_mc,
    "sweep-eta": cmd_sweep_eta,
    "sweep-sigma": cmd_sweep_sigma,
    "sweep-markov": cmd_sweep_markov,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dobkit", description="Disturbance-observer simulations and sweeps.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, help="scenario JSON file")
        sp.add_argument("--preset", type=str, help="named scenario instead of a file")
        sp.add_argument("--out", type=str, default="out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed / base seed")
        sp.add_argument("--quiet", action="store_true", help="suppress the text table")
        if name != "run":
            sp.add_argument("--runs", type=int, default=20, help="Monte-Carlo runs per point (default: 20)")
            sp.add_argument("--workers", type=int, default=None, help="threads (default: DOBKIT_THREADS or CPU count)")
        if name.startswith("sweep"):
            sp.add_argument("--grid", type=float, nargs="+", help="override the default grid")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dobkit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DobkitError as exc:
        print(f"dobkit: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"dobkit: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
