"""Command-line entry points: run scenarios and the named benchmarks."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io, plots
from .bench import run_hshape_sweep, run_localmin_sweep, run_scenario, run_threebar_demo
from .mapping import BoundaryModel, Quadrature
from .material import MaterialModel

QUASI = Quadrature("quasi_analytic")

# Interpolation/boundary pairings for the moving-bar sweep.  The *_edge
# presets study interpolation behaviour under the exact boundary model;
# the *_band presets use the slope-matched smoothed pair.
HSHAPE_PRESETS = {
    "exact_linear": (BoundaryModel("exact", rho_min=1.0e-3), MaterialModel("linear")),
    "exact_power": (BoundaryModel("exact", rho_min=1.0e-3), MaterialModel("power", p=3.0)),
    "exact_ramp": (BoundaryModel("exact", rho_min=1.0e-3), MaterialModel("ramp", q=1.0)),
    "exact_hs_bound": (BoundaryModel("exact", rho_min=1.0e-3), MaterialModel("hs_bound")),
    "linear_band": (BoundaryModel("linear", h=1.5, rho_min=1.0e-3), MaterialModel("linear")),
    "tanh_band": (BoundaryModel("tanh", beta=4.0 / 3.0, rho_min=1.0e-3), MaterialModel("linear")),
}


def _resolve_threads(value):
    if value is not None:
        return max(1, value)
    env = os.environ.get("FEATMAP_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            print(f"ignoring non-integer FEATMAP_THREADS='{env}'", file=sys.stderr)
    return 1


def _bench_hshape(out, preset, threads):
    model, material = HSHAPE_PRESETS[preset]
    s_values = np.arange(14.0, 22.0 + 1.0e-9, 0.05)
    rows = run_hshape_sweep(s_values, model, material, QUASI, threads=threads)
    data = [[r.s, r.objective, r.gray_left, r.gray_right, r.volume] for r in rows]
    artifacts = [
        io.write_csv(out / "hshape.csv", ["s", "objective", "gray_left", "gray_right", "volume"], data),
        plots.save_curve_png(
            out / "hshape_objective.png", s_values, {"objective": [r.objective for r in rows]},
            xlabel="bar position s", ylabel="compliance", title=preset,
        ),
        plots.save_curve_png(
            out / "hshape_grayness.png", s_values,
            {"left edge": [r.gray_left for r in rows], "right edge": [r.gray_right for r in rows]},
            xlabel="bar position s", ylabel="grayness sum", title=preset,
        ),
    ]
    return artifacts, {"preset": preset, "samples": len(rows)}


def _bench_localmin(out, threads):
    result = run_localmin_sweep(samples=201, threads=threads)
    rows = zip(result.ratios, result.objectives)
    minima_rows = [
        [i, float(result.ratios[i]), float(result.objectives[i])] for i in result.minima
    ]
    artifacts = [
        io.write_csv(out / "localmin.csv", ["h_over_L", "objective"], rows),
        io.write_csv(out / "minima.csv", ["index", "h_over_L", "objective"], minima_rows),
        plots.save_curve_png(
            out / "localmin.png", result.ratios, {"objective": result.objectives},
            xlabel="h / L", ylabel="compliance", marks=result.minima_ratios,
            title="moving-bar landscape",
        ),
    ]
    return artifacts, {"minima": result.minima_ratios}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="featmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario file's study")
    run_p.add_argument("scenario", type=Path)
    run_p.add_argument("--out", type=Path, default=None)
    run_p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="section.key=value, may repeat")
    run_p.add_argument("--threads", type=int, default=None)

    verify_p = sub.add_parser("verify", help="finite-difference check of a scenario's gradients")
    verify_p.add_argument("scenario", type=Path)
    verify_p.add_argument("--out", type=Path, default=None)

    bench_p = sub.add_parser("bench", help="run a named benchmark study")
    bench_p.add_argument("name", choices=["hshape", "threebar", "localmin"])
    bench_p.add_argument("--preset", default="exact_linear", choices=sorted(HSHAPE_PRESETS))
    bench_p.add_argument("--out", type=Path, default=None)
    bench_p.add_argument("--threads", type=int, default=None)

    args = parser.parse_args(argv)

    if args.command in ("run", "verify"):
        out = args.out if args.out is not None else Path(f"featmap-out/{args.scenario.stem}")
        if args.command == "verify":
            report = run_scenario(args.scenario, out_dir=out, overrides=("study.kind=verify",))
        else:
            report = run_scenario(
                args.scenario, out_dir=out,
                overrides=tuple(args.override), threads=_resolve_threads(args.threads),
            )
        if report.error:
            print(f"featmap: {report.error}", file=sys.stderr)
        for path in report.artifacts:
            print(path)
        return report.code

    threads = _resolve_threads(args.threads)
    out = args.out if args.out is not None else Path(f"featmap-out/{args.name}")
    start = time.perf_counter()
    extra = {}
    if args.name == "hshape":
        artifacts, extra = _bench_hshape(out, args.preset, threads)
    elif args.name == "localmin":
        artifacts, extra = _bench_localmin(out, threads)
    else:
        artifacts = run_threebar_demo(out)
    manifest = io.write_manifest(
        out / "manifest.json",
        command=f"bench:{args.name}",
        inputs={"preset": args.preset if args.name == "hshape" else "", "threads": threads},
        outputs=[str(p) for p in artifacts],
        wall_time_s=time.perf_counter() - start,
        extra=extra,
    )
    artifacts.append(manifest)
    for path in artifacts:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
