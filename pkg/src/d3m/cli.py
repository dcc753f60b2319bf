"""Command-line front end: ``d3m calibrate | solve | scaling``."""
import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import costmodel
from .errors import (D3MError, FactorizationError, InvalidArgumentError, ParseError,
                     SingularDomainError)
from .executor import collect_timeline, execute_sequential, resolve_workers
from .pipeline import measured_samples, plan, run_plan
from .problem import generate_grid_problem, load_system
from .scheduler import export_gantt

log = logging.getLogger("d3m")

EXIT_OK, EXIT_IO, EXIT_RESIDUAL, EXIT_SINGULAR, EXIT_USAGE = 0, 2, 3, 4, 1
RESIDUAL_TOL = 1e-8


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb" if isinstance(data, bytes) else "w", newline=None if isinstance(data, bytes) else "") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _stencil(text):
    if text == "laplacian":
        return ("laplacian", 0.0)
    if text.startswith("helmholtz:"):
        try:
            return ("helmholtz", float(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise argparse.ArgumentTypeError(f"stencil must be 'laplacian' or 'helmholtz:<k>', got {text!r}")


def save_solution(x, out_dir, meta):
    """``solution.bin`` holds little-endian doubles in row-major (n, nrhs) order."""
    x = np.ascontiguousarray(x, dtype="<f8")
    _atomic_write(os.path.join(out_dir, "solution.bin"), x.tobytes())
    header = dict(meta, n=int(x.shape[0]), nrhs=int(x.shape[1]), dtype="<f8", order="C", file="solution.bin")
    _atomic_write(os.path.join(out_dir, "solution.json"), json.dumps(header, indent=1))


def load_solution(out_dir):
    with open(os.path.join(out_dir, "solution.json")) as fh:
        header = json.load(fh)
    x = np.fromfile(os.path.join(out_dir, header["file"]), dtype=header["dtype"])
    return x.reshape(header["n"], header["nrhs"]), header


def _add_problem_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--generate", type=_int_list, metavar="dx[,dy[,dz]]", help="generate a grid problem")
    src.add_argument("--matrix", metavar="PATH", help="Matrix Market file (symmetric)")
    p.add_argument("--stencil", type=_stencil, default=("laplacian", 0.0), help="laplacian or helmholtz:<k>")
    p.add_argument("--rhs", choices=("ones", "random"), default="ones", help="right-hand side of generated problems")
    p.add_argument("--shift", type=float, default=0.0, help="diagonal regularization of interior blocks")
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--partitioner", choices=("grid", "bfs"),
                   help="default: grid for generated problems, bfs for --matrix")
    p.add_argument("--workers", type=int, default=1, help="worker count (D3M_WORKERS overrides)")
    p.add_argument("--memory-mode", choices=("fast", "compact"), default="fast")
    p.add_argument("--agglomerate", choices=("column", "none"), default="column")
    p.add_argument("--calibration", metavar="PATH", help="kernel calibration file (default: <out>/calibration.json)")
    p.add_argument("--bandwidth", type=float, default=float("inf"), help="scheduler bytes/s between workers")
    p.add_argument("--latency", type=float, default=0.0, help="scheduler per-message latency in seconds")
    p.add_argument("--out", default="d3m-out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true", help="write a JSON-lines event trace")


def build_parser():
    parser = argparse.ArgumentParser(prog="d3m", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="time the dense kernels")
    cal.add_argument("--sizes", type=_int_list, default=list(costmodel.DEFAULT_SIZES))
    cal.add_argument("--repetitions", type=int, default=5)
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--out", default="calibration.json", help="calibration file to write")

    solve = sub.add_parser("solve", help="solve one problem")
    _add_problem_args(solve)

    scaling = sub.add_parser("scaling", help="solve for several worker counts")
    _add_problem_args(scaling)
    scaling.add_argument("--worker-list", type=_int_list, default=[1, 2, 4])
    return parser


def cmd_calibrate(args):
    tables = costmodel.calibrate_kernels(args.sizes, repetitions=args.repetitions, seed=args.seed)
    costmodel.save_calibration(tables, args.out)
    print(f"calibration written to {args.out}")
    print(f"{'kernel':<10}" + "".join(f"{n:>11d}" for n in tables["factorize"].sizes))
    for kind, t in tables.items():
        print(f"{kind:<10}" + "".join(f"{x:11.3e}" for x in t.times))
    return EXIT_OK


def _load_problem(args):
    if args.matrix:
        return load_system(args.matrix, shift=args.shift)
    stencil, k = args.stencil
    return generate_grid_problem(tuple(args.generate), stencil, k=k, seed=args.seed, rhs=args.rhs, shift=args.shift)


def _tables(args):
    path = args.calibration or os.path.join(args.out, "calibration.json")
    if os.path.exists(path):
        return costmodel.load_calibration(path), path
    log.warning("no calibration at %s; calibrating now", path)
    tables = costmodel.calibrate_kernels(seed=args.seed)
    costmodel.save_calibration(tables, path)
    return tables, path


def _prepare(args):
    os.makedirs(args.out, exist_ok=True)
    system = _load_problem(args)
    tables, cal_path = _tables(args)
    samples_path = cal_path + ".samples.jsonl"
    samples = costmodel.load_samples(samples_path)
    agg = "per_block_column" if args.agglomerate == "column" else "none"
    partitioner = args.partitioner or ("bfs" if args.matrix else "grid")
    p = plan(system, args.domains, partitioner, agg, tables, samples)
    return system, p, samples_path


def _record_samples(result, path):
    costmodel.save_samples(measured_samples(result), path)


def cmd_solve(args):
    workers = resolve_workers(args.workers)
    system, p, samples_path = _prepare(args)
    stream = open(os.path.join(args.out, "trace.jsonl"), "w") if args.trace else None
    try:
        result = run_plan(p, workers, args.memory_mode, bandwidth=args.bandwidth, latency=args.latency,
                          trace_stream=stream)
    finally:
        if stream is not None:
            stream.close()
    _, breakdown = collect_timeline(result.trace, result.schedule, p.graph)
    breakdown["residual"] = result.residual
    out = args.out
    save_solution(result.x, out, {"residual": result.residual, "workers": workers,
                                  "domains": p.partition.num_domains})
    export_gantt(result.schedule, p.graph, os.path.join(out, "gantt.csv"), result.trace)
    _atomic_write(os.path.join(out, "breakdown.json"), json.dumps(breakdown, indent=1))
    _atomic_write(os.path.join(out, "schedule.json"), result.schedule.to_json())
    _atomic_write(os.path.join(out, "taskgraph.dot"), p.graph.to_dot())
    _record_samples(result, samples_path)
    print(f"n={system.n} domains={p.partition.num_domains} blocks={p.layout.num_blocks} "
          f"tasks={len(p.graph.tasks)} workers={workers}")
    print(f"predicted makespan {result.schedule.makespan:.4g}s, actual {result.trace.wall_s:.4g}s")
    print(f"relative residual {result.residual:.3e}")
    if not result.residual <= RESIDUAL_TOL:
        print(f"residual above {RESIDUAL_TOL:g}", file=sys.stderr)
        return EXIT_RESIDUAL
    return EXIT_OK


def cmd_scaling(args):
    system, p, samples_path = _prepare(args)
    base = execute_sequential(p.graph, p.state, args.memory_mode)[1].wall_s
    rows, reference, t1 = [], None, None
    for workers in args.worker_list:
        result = run_plan(p, workers, args.memory_mode, bandwidth=args.bandwidth, latency=args.latency)
        wall = result.trace.wall_s
        if t1 is None:
            t1 = wall if workers == 1 else base
        if reference is None:
            reference = result.x
        elif not np.array_equal(reference, result.x):
            print(f"solution with {workers} workers differs from the first run", file=sys.stderr)
            return EXIT_RESIDUAL
        speedup = t1 / wall if wall > 0 else 1.0
        rows.append({"P": workers, "wall_s": repr(wall), "speedup": repr(speedup),
                     "efficiency": repr(speedup / workers), "peak_bytes": result.trace.peak_block_bytes})
        print(f"P={workers:3d} wall={wall:.4f}s speedup={speedup:.3f} efficiency={speedup / workers:.3f}")
        if not result.residual <= RESIDUAL_TOL:
            print(f"residual {result.residual:.3e} above {RESIDUAL_TOL:g}", file=sys.stderr)
            return EXIT_RESIDUAL
    _atomic_write(os.path.join(args.out, "scaling.csv"),
                  _csv_text(("P", "wall_s", "speedup", "efficiency", "peak_bytes"), rows))
    _record_samples(result, samples_path)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"calibrate": cmd_calibrate, "solve": cmd_solve, "scaling": cmd_scaling}
    try:
        return handlers[args.command](args)
    except SingularDomainError as exc:
        print(f"singular domain {exc.domain_id}: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except FactorizationError as exc:
        print(f"singular reduced block {exc.block}: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidArgumentError, D3MError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
