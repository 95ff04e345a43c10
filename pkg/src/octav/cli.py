"""Command-line calibration over directories of OCTV tensor dumps.

Subcommands: ``calibrate``, ``quantize``, ``sweep``, ``bench`` and
``gen-corpus`` (synthetic weight-shaped tensors for benchmarking).

Exit codes: 0 success, 1 input error, 2 degenerate data under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .noise import DegenerateTensorError, empirical_mse, percentile_magnitude, sweep
from .quantizer import QuantSpec, ScalarSet, max_scalar, quantize_clipped
from .solver import OctavConfig, octav
from .tensor import GroupView, Tensor, group_view, load_tensor, save_tensor

SCHEMA_VERSION = 1
_BATCH_RE = re.compile(r"^(?P<name>.+)\.batch(?P<k>\d+)\.octv$")
EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2
MIN_BENCH_TENSORS = 10
MIN_BENCH_ELEMENTS = 100_000


class InputError(Exception):
    """Bad command-line input; maps to exit code 1."""


@dataclass(frozen=True)
class Method:
    kind: str  # "octav" | "sweep" | "percentile" | "max"
    param: float | None = None

    def __str__(self):
        if self.param is None:
            return self.kind
        return f"{self.kind}:{self.param:g}"


def parse_method(text: str) -> Method:
    """Parse ``octav``, ``max``, ``sweep:N`` or ``percentile:P``."""
    kind, _, arg = text.partition(":")
    if kind in ("octav", "max") and not arg:
        return Method(kind)
    try:
        if kind == "sweep" and arg:
            n = int(arg)
            if n >= 2:
                return Method(kind, n)
        if kind == "percentile" and arg:
            p = float(arg)
            if 0 < p <= 100:
                return Method(kind, p)
    except ValueError:
        pass
    raise InputError(f"unknown method {text!r} (octav | sweep:N | percentile:P | max)")


def parse_granularity(text: str) -> int | None:
    if text == "tensor":
        return None
    m = re.fullmatch(r"row:(-?\d+)", text)
    if not m:
        raise InputError(f"bad granularity {text!r} (tensor | row:AXIS)")
    return int(m.group(1))


def make_view(shape, axis) -> GroupView:
    try:
        return group_view(tuple(shape), axis)
    except ValueError as e:
        raise InputError(str(e)) from None


def calibrate_scalars(
    x: np.ndarray, view: GroupView, spec: QuantSpec, method: Method, iterations: int = 10
) -> ScalarSet:
    """Clipping scalars for one tensor; all-zero groups get scalar 0."""
    if method.kind == "max":
        return max_scalar(x, view, spec.signed)
    if method.kind == "percentile":
        if not spec.signed and np.any(x < 0):
            raise ValueError("unsigned quantization applied to negative data")
        return percentile_magnitude(x, view, method.param)
    if method.kind == "octav":
        return octav(x, view, spec, OctavConfig(iterations=iterations))[0]
    rows = view.split(x)
    live = np.any(rows != 0, axis=1)
    s = np.zeros(len(rows))
    if live.any():
        sub = rows[live]
        curves = sweep(sub, group_view(sub, 0), spec, int(method.param))
        s[live] = [c.best_scalar for c in curves]
    return ScalarSet(s, view, degenerate=~live)


def find_tensors(input_dir: Path, pattern: str | None) -> dict[str, list[Path]]:
    """Map tensor name to its batch files (a plain ``name.octv`` is one batch)."""
    if not input_dir.is_dir():
        raise InputError(f"not a directory: {input_dir}")
    files = sorted(input_dir.glob(pattern or "*.octv"))
    groups: dict[str, list[tuple[int, Path]]] = {}
    for f in files:
        if not f.is_file():
            continue
        m = _BATCH_RE.match(f.name)
        if m:
            groups.setdefault(m.group("name"), []).append((int(m.group("k")), f))
        elif f.suffix == ".octv":
            groups.setdefault(f.stem, []).append((-1, f))
    if not groups:
        raise InputError(f"no OCTV files in {input_dir}")
    return {name: [p for _, p in sorted(v)] for name, v in sorted(groups.items())}


def _load(path: Path) -> Tensor:
    try:
        return load_tensor(path)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _scalar_summary(s: np.ndarray) -> dict:
    return {"count": int(s.size), "min": float(s.min()), "max": float(s.max()), "mean": float(s.mean())}


def calibrate_one(name, paths, spec, method, axis, iterations) -> dict:
    tensors = [_load(p) for p in paths]
    shape = tensors[0].shape
    for p, t in zip(paths, tensors):
        if t.shape != shape:
            raise InputError(f"{p}: shape {t.shape} differs from {shape} in earlier batches")
    view = make_view(shape, axis)
    start = time.perf_counter()
    candidates = [calibrate_scalars(t.values, view, spec, method, iterations) for t in tensors]
    elapsed = time.perf_counter() - start
    cand = np.stack([c.scalars for c in candidates])
    live = np.stack([~c.degenerate for c in candidates])
    n_live = live.sum(axis=0)
    # average the candidates of the batches where the group is nonzero
    s = np.where(n_live > 0, (cand * live).sum(axis=0) / np.maximum(n_live, 1), 0.0)
    scalars = ScalarSet(s, view, degenerate=n_live == 0)
    # union of equal-sized batches: mean of per-batch group MSEs
    group_mse = np.mean([empirical_mse(t.values, scalars, spec) for t in tensors], axis=0)
    return {
        "name": name,
        "shape": list(shape),
        "granularity": "tensor" if axis is None else f"row:{view.axis}",
        "method": str(method),
        "batches": len(tensors),
        "scalars": [float(v) for v in scalars.scalars],
        "scalar_summary": _scalar_summary(scalars.scalars),
        "degenerate_groups": [int(g) for g in np.flatnonzero(scalars.degenerate)],
        "mse": float(np.mean(group_mse)),
        "group_mse": [float(v) for v in group_mse],
        "seconds": elapsed,
    }


def _spec(args) -> QuantSpec:
    try:
        return QuantSpec(args.bits, signed=not args.unsigned, boundary=args.boundary)
    except ValueError as e:
        raise InputError(str(e)) from None


def _spec_json(spec: QuantSpec) -> dict:
    return {"bits": spec.bits, "signed": spec.signed, "boundary": spec.boundary}


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_calibrate(args) -> int:
    spec = _spec(args)
    method = parse_method(args.method)
    axis = parse_granularity(args.granularity)
    groups = find_tensors(Path(args.input_dir), args.batches)

    def job(item):
        return calibrate_one(item[0], item[1], spec, method, axis, args.iterations)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        try:
            entries = list(pool.map(job, groups.items()))
        except ValueError as e:
            raise InputError(str(e)) from None
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "calibrate",
        "spec": _spec_json(spec),
        "method": str(method),
        "iterations": args.iterations,
        "tensors": entries,
    }
    _write_json(report, args.out)
    return _degenerate_exit(
        args, [f"{e['name']} group {g}" for e in entries for g in e["degenerate_groups"]]
    )


def _degenerate_exit(args, items: list[str]) -> int:
    if not items:
        return EXIT_OK
    print(f"warning: degenerate (all-zero) data: {', '.join(items[:10])}", file=sys.stderr)
    return EXIT_DEGENERATE if args.strict else EXIT_OK


def _read_scalars(path: Path, name: str, view: GroupView) -> ScalarSet:
    if path.suffix == ".json":
        report = json.loads(path.read_text())
        for e in report.get("tensors", []):
            if e["name"] == name:
                s = np.asarray(e["scalars"], dtype=np.float64)
                break
        else:
            raise InputError(f"{path}: no tensor named {name!r}")
    else:
        s = _load(path).values.ravel()
    if s.size != view.group_count:
        raise InputError(f"{path}: {s.size} scalars for {view.group_count} groups")
    try:
        return ScalarSet(s, view)
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None


def _tensor_name(path: Path) -> str:
    m = _BATCH_RE.match(path.name)
    return m.group("name") if m else path.stem


def cmd_quantize(args) -> int:
    spec = _spec(args)
    src = Path(args.input)
    t = _load(src)
    view = make_view(t.shape, parse_granularity(args.granularity))
    try:
        if args.scalars:
            scalars = _read_scalars(Path(args.scalars), args.name or _tensor_name(src), view)
        else:
            scalars = calibrate_scalars(
                t.values, view, spec, parse_method(args.method), args.iterations
            )
        q = quantize_clipped(t.values, scalars, spec)
        mse = float(np.mean(empirical_mse(t.values, scalars, spec)))
    except ValueError as e:
        raise InputError(str(e)) from None
    save_tensor(Tensor(q), args.out)
    print(json.dumps({"input": str(src), "output": args.out, "mse": mse}))
    return _degenerate_exit(args, [f"group {g}" for g in np.flatnonzero(scalars.degenerate)])


def cmd_sweep(args) -> int:
    spec = _spec(args)
    t = _load(Path(args.input))
    axis = parse_granularity(args.granularity)
    view = make_view(t.shape, axis)
    try:
        curves = sweep(t.values, view, spec, args.points, args.mode)
    except DegenerateTensorError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        raise InputError(str(e)) from None
    if axis is None:
        curves[0].to_csv(args.out)
    else:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "scalar", "mse"])
            for g, c in enumerate(curves):
                for s, j in zip(c.scalars, c.mse):
                    w.writerow([g, repr(float(s)), repr(float(j))])
    return EXIT_OK


def time_calibration(x, view, spec, method: Method, iterations: int) -> float:
    """Wall time of exactly one calibration call."""
    start = time.perf_counter()
    calibrate_scalars(x, view, spec, method, iterations)
    return time.perf_counter() - start


def run_bench(tensors: dict[str, np.ndarray], spec, axis, repetitions: int, iterations: int = 10, points: int = 100) -> dict:
    """Serial OCTAV vs empirical-sweep timing over ``tensors``."""
    methods = {"octav": Method("octav"), "sweep": Method("sweep", points)}
    totals = {k: np.zeros(repetitions) for k in methods}
    for r in range(repetitions):
        for x in tensors.values():
            view = make_view(x.shape, axis)
            for k, m in methods.items():
                totals[k][r] += time_calibration(x, view, spec, m, iterations)
    n = len(tensors)
    warn = []
    if n < MIN_BENCH_TENSORS:
        warn.append(f"only {n} tensors (want >= {MIN_BENCH_TENSORS})")
    small = [k for k, x in tensors.items() if x.size < MIN_BENCH_ELEMENTS]
    if small:
        warn.append(f"{len(small)} tensors below {MIN_BENCH_ELEMENTS} elements")
    result = {"schema_version": SCHEMA_VERSION, "command": "bench", "tensor_count": n,
              "repetitions": repetitions, "spec": _spec_json(spec)}
    for k in methods:
        result[k] = {
            "method": str(methods[k]),
            "total_seconds": float(totals[k].mean()),
            "per_tensor_mean_seconds": float(totals[k].mean() / n),
            "total_seconds_variance": float(totals[k].var(ddof=1)) if repetitions > 1 else 0.0,
            "repetition_totals": [float(v) for v in totals[k]],
        }
    result["speedup"] = result["sweep"]["total_seconds"] / result["octav"]["total_seconds"]
    result["representative"] = not warn
    result["warnings"] = warn
    return result


def cmd_bench(args) -> int:
    spec = _spec(args)
    axis = parse_granularity(args.granularity)
    groups = find_tensors(Path(args.input_dir), args.batches)
    tensors = {}
    for name, paths in groups.items():
        for p in paths:
            key = name if len(paths) == 1 else p.name
            tensors[key] = _load(p).values
    try:
        result = run_bench(tensors, spec, axis, args.repetitions, args.iterations)
    except DegenerateTensorError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEGENERATE if args.strict else EXIT_INPUT
    _write_json(result, args.out)
    for w in result["warnings"]:
        print(f"warning: {w}; result is not representative", file=sys.stderr)
    return EXIT_OK


def corpus_shapes(count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Conv (K, C, R, R) and linear (out, in) shapes with >= 1e5 elements."""
    shapes = []
    while len(shapes) < count:
        if rng.random() < 0.7:
            k = int(rng.choice([64, 128, 256]))
            c = int(rng.choice([64, 128, 256]))
            r = int(rng.choice([1, 3]))
            shape = (k, c, r, r)
        else:
            shape = (int(rng.choice([256, 512, 1000])), int(rng.choice([256, 512, 1024])))
        if MIN_BENCH_ELEMENTS <= int(np.prod(shape)) <= 600_000:
            shapes.append(shape)
    return shapes


def make_corpus(count: int = 74, seed: int = 0) -> dict[str, np.ndarray]:
    """Synthetic weight tensors: Gaussian, Laplacian and Student-t draws
    scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    out = {}
    for i, shape in enumerate(corpus_shapes(count, rng)):
        fan_in = int(np.prod(shape[1:]))
        kind = ("gauss", "laplace", "student")[i % 3]
        if kind == "gauss":
            x = rng.standard_normal(shape)
        elif kind == "laplace":
            x = rng.laplace(size=shape) / np.sqrt(2.0)
        else:
            x = rng.standard_t(5, size=shape) / np.sqrt(5.0 / 3.0)
        out[f"w{i:03d}_{kind}"] = x / np.sqrt(fan_in)
    return out


def cmd_gen_corpus(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, x in make_corpus(args.count, args.seed).items():
        save_tensor(Tensor(x, storage="f32"), out / f"{name}.octv")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--unsigned", action="store_true")
    p.add_argument("--granularity", default="tensor", help="tensor | row:AXIS")
    p.add_argument("--boundary", choices=("math", "twos"), default="math")
    p.add_argument("--iterations", type=int, default=10, help="OCTAV iterations")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="exit 2 on degenerate data")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octav-calib", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="compute clipping scalars for every tensor")
    p.add_argument("input_dir")
    p.add_argument("--method", default="octav", help="octav | sweep:N | percentile:P | max")
    p.add_argument("--batches", help="glob selecting files inside input_dir")
    p.add_argument("--out", help="JSON report path (default stdout)")
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize one tensor file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scalars", help="OCTV file of per-group scalars or a calibrate report")
    src.add_argument("--method", default="octav")
    p.add_argument("--name", help="tensor name to look up in a calibrate report")
    _common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sweep", help="write the MSE-vs-scalar curve as CSV")
    p.add_argument("input")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--mode", choices=("empirical", "analytical"), default="empirical")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time OCTAV against a 100-point sweep")
    p.add_argument("input_dir")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--batches", help="glob selecting files inside input_dir")
    p.add_argument("--out", help="JSON result path (default stdout)")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", help="write synthetic weight tensors")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=74)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
