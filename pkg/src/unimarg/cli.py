"""``unimarg`` command line: graph generation, training, queries and the benchmark grid."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from ._rng import stream
from .errors import NumericError, ValidationError
from .evaluation import BENCHMARK_GRAPHS, run_benchmark
from .inference import GuideConfig, MarginalSet, UmGuide, cond_marginals, effective_sample_size, importance_sample, posterior_estimates
from .masking import DEFAULT_PRIOR_SAMPLES, EncodingLayout, compute_prior_stats
from .neural import FLEXIBLE, PRESETS, STANDARD, Architecture, build_um, load_checkpoint, save_checkpoint
from .program import Evidence, builtin_probprog, dumps_program, enumerate_posterior, loads_program, make_named_graph
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "UNIMARG_WORKERS"
MODE_ALIASES = {"standard": STANDARD, "flex": FLEXIBLE, "flexible": FLEXIBLE}

def _mode(text: str) -> str:
    try:
        return MODE_ALIASES[text.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"mode must be one of {sorted(MODE_ALIASES)}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    value = int(float(text))
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc.strerror}") from None


def _load_evidence(program, spec: str | None) -> Evidence:
    """Evidence from inline JSON or ``@file``; keys are site names."""
    if not spec:
        return Evidence({})
    text = _read_text(spec[1:]) if spec.startswith("@") else spec
    try:
        named = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"evidence is not valid JSON: {exc.msg}") from None
    if not isinstance(named, dict):
        raise ValidationError('evidence must be a JSON object like {"X0": 1}')
    for name, value in named.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"evidence value for {name!r} must be a number")
    return Evidence.from_names(program, named)


def _format_table(marginals: MarginalSet) -> str:
    rows = []
    for i in sorted(marginals.values):
        site = marginals.program.sites[i]
        v = marginals.values[i]
        shown = " ".join(f"{p:.6f}" for p in v) if np.ndim(v) else f"{float(v):.6f}"
        rows.append((site.name, "P" if site.is_categorical else "mean", shown))
    if not rows:
        return "(no unobserved sites)\n"
    width = max(len(r[0]) for r in rows)
    return "".join(f"{name:<{width}}  {kind:<4}  {shown}\n" for name, kind, shown in rows)


def _emit_marginals(marginals: MarginalSet, json_path: str | None, extra: dict | None = None) -> None:
    sys.stdout.write(_format_table(marginals))
    if json_path:
        obj = {"marginals": marginals.to_dict(), **(extra or {})}
        _write_text(json_path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_graph(args) -> int:
    if args.family == "probprog":
        try:
            length = int(args.n) if args.n is not None else 50
        except ValueError:
            raise ValidationError(f"bad program length {args.n!r}") from None
        program = builtin_probprog(length)
    else:
        if args.n is None:
            raise ValidationError(f"{args.family} needs a size")
        program = make_named_graph(f"{args.family}{args.n}", args.seed)
    _write_text(args.out, dumps_program(program) + "\n")
    if args.out not in (None, "-"):
        print(f"wrote {program.name} with {program.n_sites} sites to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    program = loads_program(_read_text(args.program))
    if args.hidden_layers is not None or args.width is not None:
        h, s = PRESETS[args.preset]
        arch = Architecture(args.hidden_layers or h, args.width or s, args.activation)
        preset = None
    else:
        arch = Architecture.preset(args.preset, activation=args.activation)
        preset = args.preset
    layout = EncodingLayout.for_program(program)
    stats = compute_prior_stats(program, args.prior_samples, stream(args.seed, "stats"))
    model = build_um(program, arch, args.mode, layout, stats, stream(args.seed, "init"), rng_seed=args.seed)
    model.preset = preset
    config = TrainConfig(batch_size=args.batch, iterations=args.iters, mode=args.mode, seed=args.seed, loss_log_every=args.log_every)
    model, report = train(model, program, config)
    out = Path(args.out)
    try:
        save_checkpoint(model, out)
    except OSError as exc:
        raise ValidationError(f"cannot write {out}: {exc.strerror}") from None
    heads_csv = args.loss_csv or str(out.with_suffix(".heads.csv"))
    summed_csv = args.summed_csv or str(out.with_suffix(".loss.csv"))
    report.write_csv(heads_csv, summed_csv)
    print(f"mode={model.mode} arch=h{model.arch.h}/s{model.arch.s} iters={config.iterations} batch={config.batch_size}")
    print(f"final summed loss {report.summed[-1]:.6f}")
    print(f"checkpoint {out}; losses {heads_csv}, {summed_csv}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    evidence = _load_evidence(model.program, args.evidence)
    if args.method == "direct":
        _emit_marginals(cond_marginals(model, evidence), args.json)
        return EXIT_OK
    guide = UmGuide(model, GuideConfig(args.sigma_factor, args.floor))
    samples = importance_sample(model.program, evidence, guide, args.n_samples, stream(args.seed, "infer"))
    ess = effective_sample_size(samples)
    _emit_marginals(posterior_estimates(samples), args.json, {"ess": ess, "n_samples": samples.n})
    print(f"ESS {ess:.1f} of {samples.n}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    program = loads_program(_read_text(args.program))
    evidence = _load_evidence(program, args.evidence)
    _emit_marginals(MarginalSet(program, enumerate_posterior(program, evidence)), args.json)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    workers = args.workers
    if workers is None:
        try:
            workers = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer") from None
    budget = TrainConfig(batch_size=args.batch, iterations=args.iters)
    report = run_benchmark(
        families=tuple(g for g in args.graphs.split(",") if g),
        modes=tuple(args.modes),
        presets=tuple(args.presets),
        budget=budget,
        seeds=tuple(args.seeds),
        workers=max(1, workers),
        n_queries=args.queries,
        truth_samples=args.truth_samples,
    )
    _write_text(args.out, report.to_csv(record_time=args.record_time))
    failed = [r for r in report.rows if r.error]
    for r in failed:
        print(f"cell {r.graph}/{r.mode}/{r.preset}/{r.seed} failed: {r.error}", file=sys.stderr)
    for preset in args.presets:
        means = {m: report.mean_correlation(m, preset) for m in args.modes}
        shown = ", ".join(f"{m} {v:.4f}" for m, v in means.items() if not math.isnan(v))
        if shown:
            print(f"preset {preset} mean correlation: {shown}", file=sys.stderr)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unimarg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-graph", help="write a seeded benchmark graph or the built-in branching program")
    p.add_argument("family", choices=["chain", "grid", "star", "probprog"])
    p.add_argument("n", nargs="?", help="site count (grid: a square like 9, or RxC)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", help="output JSON path (default: stdout)")
    p.set_defaults(func=cmd_gen_graph)

    p = sub.add_parser("train", help="train a network on a program JSON file")
    p.add_argument("program")
    p.add_argument("-o", "--out", required=True, help="checkpoint JSON path")
    p.add_argument("--preset", type=int, choices=sorted(PRESETS), default=2)
    p.add_argument("--hidden-layers", type=_positive, help="override the preset depth")
    p.add_argument("--width", type=_positive, help="override the preset width")
    p.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    p.add_argument("--mode", type=_mode, default=FLEXIBLE, help="standard or flex")
    p.add_argument("--iters", type=_positive, default=TrainConfig.iterations)
    p.add_argument("--batch", type=_positive, default=TrainConfig.batch_size)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior-samples", type=_positive, default=DEFAULT_PRIOR_SAMPLES)
    p.add_argument("--log-every", type=_positive, default=TrainConfig.loss_log_every)
    p.add_argument("--loss-csv", help="per-head loss CSV (default: <checkpoint>.heads.csv)")
    p.add_argument("--summed-csv", help="summed loss CSV (default: <checkpoint>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="conditional marginals from a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-e", "--evidence", help='JSON object {"site": value} or @file')
    p.add_argument("--method", choices=["direct", "guide-is"], default="direct")
    p.add_argument("-n", "--n-samples", type=_positive, default=10_000)
    p.add_argument("--sigma-factor", type=float, default=GuideConfig.sigma_factor)
    p.add_argument("--floor", type=float, default=GuideConfig.floor)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write marginals to this JSON file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("oracle", help="exact marginals by enumeration")
    p.add_argument("program")
    p.add_argument("-e", "--evidence", help='JSON object {"site": value} or @file')
    p.add_argument("--json", help="also write marginals to this JSON file")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("benchmark", help="train and score the graph x mode x preset grid")
    p.add_argument("--graphs", default=",".join(BENCHMARK_GRAPHS))
    p.add_argument("--modes", type=lambda t: [_mode(m) for m in t.split(",") if m], default=[STANDARD, FLEXIBLE])
    p.add_argument("--presets", type=_int_list, default=[1, 2, 3])
    p.add_argument("--iters", type=_positive, default=TrainConfig.iterations)
    p.add_argument("--batch", type=_positive, default=TrainConfig.batch_size)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--queries", type=_positive, default=100)
    p.add_argument("--truth-samples", type=_positive, default=1_000_000)
    p.add_argument("--workers", type=_positive, help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--record-time", action="store_true", help="fill the seconds column (makes output nondeterministic)")
    p.add_argument("-o", "--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "presets", None) is not None and any(p not in PRESETS for p in args.presets):
        parser.error(f"presets must be among {sorted(PRESETS)}")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"unimarg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"unimarg: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"unimarg: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        # malformed JSON files and checkpoints
        print(f"unimarg: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
