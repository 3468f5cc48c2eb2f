"""``rankaware`` command line.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 simulation failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .alloc import DEFAULT_PERIOD_USEC, Mode, WeightVector, allocate_cpu, format_plan_table
from .artifacts import emit_manifest, emit_processor_weights, ingest_decomposition_report
from .errors import SimulationError, ValidationError
from .io import BUNDLED, read_result, read_scenario, run_scenario, write_result
from .metrics import build_report, format_comparison
from .scaling import PatchPlan, build_patch_plan

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_SIMULATION = 4
OUT_DIR_ENV = "RANKAWARE_OUT_DIR"


def _weights(text: str) -> WeightVector:
    try:
        return WeightVector(p.strip() for p in text.split(",") if p.strip())
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _default_out(args_out, fallback: str) -> Path:
    if args_out:
        return Path(args_out)
    return Path(os.environ.get(OUT_DIR_ENV, fallback))


def _pod_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}-{i}" for i in range(n)]


def cmd_allocate(args) -> int:
    plan = allocate_cpu(args.weights, args.budget, Mode.parse(args.mode))
    print(format_plan_table(plan, args.weights, args.period))
    if args.json:
        Path(args.json).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    if args.manifests:
        out = Path(args.manifests)
        out.mkdir(parents=True, exist_ok=True)
        names = _pod_names(args.pod_prefix, plan.n_ranks)
        for name, doc in zip(names, emit_manifest(plan, names)):
            (out / f"{name}.yaml").write_text(doc)
    if args.weights_out:
        Path(args.weights_out).write_text(emit_processor_weights(args.weights))
    return EXIT_OK


def _simulate_one(job):
    source, out_root, overrides = job
    sf = read_scenario(source, **overrides)
    result, outcome = run_scenario(sf)
    doc = write_result(Path(out_root) / sf.name, result, sf, outcome)
    return sf.name, doc


def cmd_simulate(args) -> int:
    overrides = {
        "iterations": args.iterations,
        "comm_rounds_per_iter": args.comm_rounds,
        "barrier_latency_usec": args.barrier_latency,
        "sync_delay_usec": args.sync_delay,
    }
    out_root = _default_out(args.out, "rankaware-out")
    jobs = [(s, str(out_root), overrides) for s in args.scenarios]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_simulate_one, jobs))
    else:
        done = [_simulate_one(j) for j in jobs]
    for name, doc in done:
        throttled = sum(r["nr_throttled"] for r in doc["per_rank"])
        line = (f"{name}: T={doc['wall_clock_usec'] / 1e6:.3f}s iterations={doc['iterations_completed']} "
                f"nr_throttled={throttled}")
        applied = [e for e in doc["resize_log"] if e["status"] == "applied"]
        if doc["resize_log"]:
            times = sorted({e["applied_at_usec"] for e in applied})
            line += f" resizes_applied={len(applied)} at_usec={times}"
        conflicts = doc.get("resize_conflicts") or []
        if conflicts:
            line += f" resize_conflicts={len(conflicts)}"
        print(line)
        print(f"  -> {out_root / name}")
    return EXIT_OK


def cmd_plan(args) -> int:
    sf = read_scenario(args.scenario)
    entries = []
    if sf.scenario.phase_schedule is not None:
        entries.extend(build_patch_plan(sf.scenario.phase_schedule).entries)
    if sf.patch_plan is not None:
        entries.extend(sf.patch_plan.entries)
    if not entries:
        raise ValidationError(f"{sf.name} defines no phase_schedule or patch_plan")
    plan = PatchPlan(tuple(entries))
    names = _pod_names(args.pod_prefix, sf.plan.n_ranks)
    out = _default_out(args.out, "rankaware-out") / sf.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    script = plan.render_shell(names)
    (out / "resize.sh").write_text(script)
    print(script, end="")
    print(f"# written: {out / 'plan.json'}, {out / 'resize.sh'}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    baseline = read_result(args.baseline)
    reports = [build_report(baseline, baseline)]
    for path in args.configs:
        reports.append(build_report(read_result(path), baseline))
    print(format_comparison(reports))
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    return EXIT_OK


def cmd_emit(args) -> int:
    if args.kind == "weights":
        if args.from_report:
            _, weights = ingest_decomposition_report(Path(args.from_report).read_text())
        elif args.weights is not None:
            weights = args.weights
        else:
            raise ValidationError("emit weights needs -w or --from-report")
        text = emit_processor_weights(weights)
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
        return EXIT_OK

    if args.weights is None or args.budget is None:
        raise ValidationError("emit manifests needs -w and -C")
    plan = allocate_cpu(args.weights, args.budget, Mode.parse(args.mode))
    names = _pod_names(args.pod_prefix, plan.n_ranks)
    docs = emit_manifest(plan, names)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, doc in zip(names, docs):
            (out / f"{name}.yaml").write_text(doc)
    print("---\n".join(docs), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankaware", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("allocate", help="split a CPU budget across ranks by weight")
    a.add_argument("-w", "--weights", type=_weights, required=True, help="comma-separated weights, e.g. 1,1,5,15")
    a.add_argument("-C", "--budget", type=int, required=True, help="total CPU budget in millicores")
    a.add_argument("--mode", default="requests-only", choices=[m.value for m in Mode])
    a.add_argument("--period", type=int, default=DEFAULT_PERIOD_USEC, help="CFS period in microseconds")
    a.add_argument("--json", help="write the plan as JSON to this file")
    a.add_argument("--manifests", metavar="DIR", help="write one pod manifest per rank into DIR")
    a.add_argument("--weights-out", metavar="FILE", help="write a processorWeights fragment")
    a.add_argument("--pod-prefix", default="rank")
    a.set_defaults(func=cmd_allocate)

    s = sub.add_parser("simulate", help="run scenario files through the CFS simulator")
    s.add_argument("scenarios", nargs="+", help=f"scenario JSON paths or bundled names: {', '.join(BUNDLED)}")
    s.add_argument("-o", "--out", help=f"output directory (default ${OUT_DIR_ENV} or ./rankaware-out)")
    s.add_argument("--jobs", type=int, default=1, help="simulate independent scenarios in parallel")
    s.add_argument("--iterations", type=int)
    s.add_argument("--comm-rounds", type=int, help="barriers per iteration (K)")
    s.add_argument("--barrier-latency", type=int, help="per-barrier latency in microseconds")
    s.add_argument("--sync-delay", type=int, help="resize propagation delay in microseconds")
    s.set_defaults(func=cmd_simulate)

    pl = sub.add_parser("plan", help="export a scenario's resize plan as JSON and a shell script")
    pl.add_argument("scenario")
    pl.add_argument("-o", "--out")
    pl.add_argument("--pod-prefix", default="rank")
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("report", help="compare simulation results against a baseline")
    r.add_argument("baseline", help="baseline result.json or its directory")
    r.add_argument("configs", nargs="*", help="further result.json files or directories")
    r.add_argument("--json", help="write the metrics as JSON to this file")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("emit", help="write pod manifests or a processorWeights fragment")
    e.add_argument("kind", choices=["manifests", "weights"])
    e.add_argument("-w", "--weights", type=_weights)
    e.add_argument("-C", "--budget", type=int)
    e.add_argument("--mode", default="requests-only", choices=[m.value for m in Mode])
    e.add_argument("--from-report", metavar="CSV", help="derive weights from a rank,cells report")
    e.add_argument("-o", "--out", help="output directory (manifests) or file (weights)")
    e.add_argument("--pod-prefix", default="rank")
    e.set_defaults(func=cmd_emit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
