"""`bss` command line: operator forwards, evaluation, checks, benchmarks, selftest.

Exit codes: 0 success, 1 validation failure, 2 I/O or parse error.
Errors go to stderr as ``bss:error:<kind>: <message>``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import bifpn, checks, gradcheck, metrics, shuffle_attention as sa, simam
from ._parallel import resolve_threads
from .errors import BssError, FormatError
from .io import (
    atomic_write_bytes,
    atomic_write_text,
    dumps_json,
    encode_bst,
    read_tensor,
    tensor_from_json,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
DEFAULT_NAMES = "D00,D10,D20,D40"


class ValidationFailure(Exception):
    """A run finished but something it verified did not hold."""


def _fail(kind, msg):
    print(f"bss:error:{kind}: {msg}", file=sys.stderr)


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
    return v


def _level_path(s):
    level, sep, path = s.partition("=")
    if not sep or not level or not path:
        raise argparse.ArgumentTypeError(f"expected LEVEL=PATH, got {s!r}")
    return level, Path(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_simam(args):
    x = read_tensor(args.inp)
    cfg = simam.SimAMConfig(args.lam)
    y = simam.simam_forward(x, cfg)
    outputs = {args.out: encode_bst(y)}
    if args.emit_energy:
        outputs[args.emit_energy] = encode_bst(simam.simam_energy(x, cfg).e_star)
    for path, data in outputs.items():
        atomic_write_bytes(path, data)
    return EXIT_OK


def cmd_sa(args):
    x = read_tensor(args.inp)
    cfg = sa.SAConfig(groups=args.groups, gn_delta=args.gn_delta, shuffle_groups=args.shuffle_groups)
    half = cfg.check(x.shape[1])
    wts = sa.SAWeights.load(args.weights) if args.weights else sa.SAWeights.default(half)
    atomic_write_bytes(args.out, encode_bst(sa.sa_forward(x, cfg, wts)))
    return EXIT_OK


def cmd_fuse(args):
    g = bifpn.load_graph(args.graph) if args.graph else bifpn.default_neck()
    if args.weights:
        g = bifpn.apply_weights_dir(g, args.weights)
    rep = bifpn.graph_validate(g)
    if not rep.ok:
        raise ValidationFailure(f"invalid graph: {rep}")
    if args.simplify:
        g = bifpn.graph_simplify(g)
    inputs = {}
    for level, path in args.input:
        if level in inputs:
            raise ValidationFailure(f"input level {level} given twice")
        inputs[level] = read_tensor(path)
    outs = bifpn.graph_execute(g, inputs)
    blobs = {name: encode_bst(t) for name, t in outs.items()}
    for name, data in blobs.items():
        atomic_write_bytes(Path(args.out_dir) / f"{name}.bst", data)
    return EXIT_OK


def _write_eval(rep, out_dir):
    out_dir = Path(out_dir)
    files = {"report.json": dumps_json(rep.to_dict())}
    for c in rep.classes:
        files[f"pr_{c.cls}_{c.name}.csv"] = c.curve.to_csv()
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
    return files


def _print_eval(rep, file=None):
    file = file or sys.stdout
    print(f"{'class':>8} {'gt':>4} {'det':>4} {'TP':>4} {'FP':>4} {'FN':>4} {'P':>7} {'R':>7} {'F1':>7} {'AP':>7}", file=file)
    for c in rep.classes:
        ap = "n/a" if c.ap is None else f"{c.ap:.4f}"
        print(f"{c.name:>8} {c.n_gt:>4} {c.n_det:>4} {c.tp:>4} {c.fp:>4} {c.fn:>4} "
              f"{c.precision:7.4f} {c.recall:7.4f} {c.f1:7.4f} {ap:>7}", file=file)
    print(f"mAP@{rep.iou_thresh:g} = {rep.map:.6f}", file=file)


def _names(args):
    if args.names:
        return args.names.split(",")
    default = DEFAULT_NAMES.split(",")
    return default if args.classes == len(default) else None


def cmd_eval(args):
    if not 0 < args.iou <= 1:
        raise ValidationFailure(f"--iou must be in (0, 1], got {args.iou}")
    rep = metrics.eval_dataset(args.gt, args.det, args.iou, args.classes, _names(args), args.threads)
    if args.out_dir:
        _write_eval(rep, args.out_dir)
    _print_eval(rep)
    return EXIT_OK


def _run_checks(suites, seed, op, tol, trials, threads):
    results = []
    for suite in suites:
        results.extend(checks.run_suite(suite, seed=seed, op=op, tol=tol, trials=trials, threads=threads))
    return results


def cmd_check(args):
    suites = checks.SUITES if args.suite == "all" else (args.suite,)
    if args.op and args.op not in gradcheck.REGISTRY:
        raise ValidationFailure(f"unknown op {args.op!r}; known: {', '.join(sorted(gradcheck.REGISTRY))}")
    results = _run_checks(suites, args.seed, args.op, args.tol, args.trials, args.threads)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite:<10} {r.name:<{width}}  {r.detail}")
    report = {"seed": args.seed, "tol": args.tol, "results": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    if args.out:
        atomic_write_text(args.out, dumps_json(report))
    else:
        print(dumps_json(report), end="")
    return EXIT_OK if report["passed"] else EXIT_INVALID


BENCH_SHAPES = ((1, 64, 80, 80), (1, 128, 40, 40), (1, 256, 20, 20))


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    rows = []

    def timeit(name, shape, fn):
        fn()
        t0 = time.perf_counter()
        for _ in range(args.repeat):
            fn()
        dt = (time.perf_counter() - t0) / args.repeat
        rows.append({"op": name, "shape": list(shape), "seconds": dt,
                     "melem_per_s": float(np.prod(shape)) / dt / 1e6})

    for shape in BENCH_SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        timeit("simam_forward", shape, lambda: simam.simam_forward(x))
        cfg = sa.SAConfig(groups=8, shuffle_groups=2)
        timeit("sa_forward", shape, lambda: sa.sa_forward(x, cfg))
        timeit("fuse_weighted[2]", shape, lambda: bifpn.fuse_weighted([x, x], [1.0, 1.0]))
    g = bifpn.default_neck()
    ins = {lv: rng.standard_normal(d).astype(np.float32) for lv, d in g.inputs.items()}
    timeit("graph_execute[default]", g.inputs["P3"], lambda: bifpn.graph_execute(g, ins))
    for r in rows:
        print(f"{r['op']:<24} {str(tuple(r['shape'])):<20} {r['seconds'] * 1e3:9.3f} ms  {r['melem_per_s']:8.1f} Melem/s")
    if args.out:
        atomic_write_text(args.out, dumps_json({"repeat": args.repeat, "results": rows}))
    return EXIT_OK


# --------------------------------------------------------------------------
# selftest


def _fixture(*parts):
    return resources.files("bss.fixtures").joinpath(*parts)


def _fixture_tensor(name):
    return tensor_from_json(json.loads(_fixture("tensors", f"{name}.json").read_text()), name)


def selftest(out_dir, threads=1):
    """Run every shipped fixture, write artifacts to out_dir, return the report dict."""
    out_dir = Path(out_dir)
    artifacts = {}
    cases = []

    def case(name, ok, detail=""):
        cases.append({"name": name, "passed": bool(ok), "detail": detail})

    def close(a, b):
        return a.shape == b.shape and float(np.abs(a.astype(np.float64) - b).max()) <= 1e-6

    x = _fixture_tensor("simam_in")
    y = simam.simam_forward(x, simam.SimAMConfig(1e-4))
    artifacts["simam_out.bst"] = encode_bst(y)
    case("simam fixture", close(y, _fixture_tensor("simam_out")))

    x = _fixture_tensor("sa_in")
    y = sa.sa_forward(x, sa.SAConfig(groups=2, shuffle_groups=2))
    artifacts["sa_out.bst"] = encode_bst(y)
    case("sa fixture", close(y, _fixture_tensor("sa_out")))

    g = bifpn.graph_from_json(json.loads(_fixture("tiny_neck.json").read_text()))
    outs = bifpn.graph_execute(g, {lv: _fixture_tensor(f"neck_{lv}") for lv in g.inputs})
    ok = True
    for name, t in outs.items():
        artifacts[f"neck_{name}.bst"] = encode_bst(t)
        ok &= close(t, _fixture_tensor(f"neck_out_{name}"))
    case("tiny neck fixture", ok)

    for name in ("bss_default_neck.json", "pan_neck.json", "tiny_neck.json"):
        rep = bifpn.graph_validate(bifpn.graph_from_json(json.loads(_fixture(name).read_text())))
        case(f"graph {name} validates", rep.ok, str(rep))
    simp = bifpn.graph_simplify(bifpn.pan_neck())
    case("simplify(pan_neck) == default neck", bifpn.graph_to_json(simp) == bifpn.graph_to_json(bifpn.default_neck()))

    with resources.as_file(_fixture("eval")) as eval_dir:
        rep = metrics.eval_dataset(eval_dir / "gt", eval_dir / "det.jsonl", 0.5, 4,
                                   DEFAULT_NAMES.split(","), threads)
        golden = (eval_dir / "golden_report.json").read_text()
    report_text = dumps_json(rep.to_dict())
    artifacts["eval/report.json"] = report_text.encode()
    for c in rep.classes:
        artifacts[f"eval/pr_{c.cls}_{c.name}.csv"] = c.curve.to_csv().encode()
    case("eval golden report (byte-identical)", report_text == golden, f"mAP {rep.map:.6f}")

    for name, data in artifacts.items():
        atomic_write_bytes(out_dir / name, data)
    summary = {
        "cases": cases,
        "artifacts": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(artifacts.items())},
        "passed": all(c["passed"] for c in cases),
    }
    atomic_write_text(out_dir / "selftest_report.json", dumps_json(summary))
    return summary


def cmd_selftest(args):
    summary = selftest(args.out_dir, args.threads)
    for c in summary["cases"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}  {c['detail']}".rstrip())
    return EXIT_OK if summary["passed"] else EXIT_INVALID


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message)
        sys.exit(EXIT_IO)


def build_parser():
    p = _Parser(prog="bss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default $BSS_THREADS or core count)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("simam", cmd_simam, "SimAM attention forward")
    sp.add_argument("--in", dest="inp", required=True, type=Path)
    sp.add_argument("--lambda", dest="lam", type=_nonneg_float, default=simam.DEFAULT_LAMBDA)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--emit-energy", type=Path)

    sp = add("sa", cmd_sa, "Shuffle Attention forward")
    sp.add_argument("--in", dest="inp", required=True, type=Path)
    sp.add_argument("--groups", type=_positive_int, default=1)
    sp.add_argument("--shuffle-groups", type=_positive_int, default=2)
    sp.add_argument("--gn-delta", type=_positive_float, default=1e-5)
    sp.add_argument("--weights", type=Path, help="directory with manifest.json naming w1, b1, w2, b2")
    sp.add_argument("--out", required=True, type=Path)

    sp = add("fuse", cmd_fuse, "execute a fusion graph")
    sp.add_argument("--graph", type=Path, help="graph JSON (default: bundled three-level neck)")
    sp.add_argument("--input", action="append", type=_level_path, default=[], metavar="LEVEL=PATH")
    sp.add_argument("--weights", type=Path, help="directory with manifest.json of per-node overrides")
    sp.add_argument("--simplify", action="store_true", help="prune pass-through nodes and add skips first")
    sp.add_argument("--out-dir", required=True, type=Path)

    sp = add("eval", cmd_eval, "evaluate detections against ground truth")
    sp.add_argument("--gt", required=True, type=Path)
    sp.add_argument("--det", required=True, type=Path)
    sp.add_argument("--iou", type=float, default=metrics.DEFAULT_IOU)
    sp.add_argument("--classes", type=_positive_int, default=4)
    sp.add_argument("--names", help=f"comma-separated class names (default {DEFAULT_NAMES} for 4 classes)")
    sp.add_argument("--out-dir", type=Path)

    sp = add("check", cmd_check, "run invariant, oracle and gradient suites")
    sp.add_argument("--suite", choices=("all",) + checks.SUITES, default="all")
    sp.add_argument("--op", help="restrict the grad suite to one registered op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=_positive_float, default=gradcheck.DEFAULT_TOL)
    sp.add_argument("--trials", type=_positive_int, default=20)
    sp.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")

    sp = add("bench", cmd_bench, "time operators on typical feature-map shapes")
    sp.add_argument("--repeat", type=_positive_int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path)

    sp = add("selftest", cmd_selftest, "run every shipped fixture")
    sp.add_argument("--out-dir", type=Path, default=Path("selftest_out"))
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads = resolve_threads(args.threads)
    except ValueError as exc:
        _fail("config", f"BSS_THREADS: {exc}")
        return EXIT_IO
    try:
        return args.func(args)
    except ValidationFailure as exc:
        _fail("validation", str(exc))
        return EXIT_INVALID
    except FormatError as exc:
        _fail("parse", str(exc))
        return EXIT_IO
    except OSError as exc:
        _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}")
        return EXIT_IO
    except BssError as exc:
        _fail(type(exc).__name__.replace("Error", "").lower() or "error", str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
