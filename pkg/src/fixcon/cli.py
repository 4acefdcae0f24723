"""Command-line entry point: ``fixcon <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .engine import RepairConfig, evaluate, localize, metadata_paths, run_repair, write_outcome, write_repair_log
from .errors import FixconError, RepairAborted
from .injector import CATEGORIES, FaultSpec, inject, make_desk_model
from .interpreter.dataset import load_dataset, save_dataset
from .interpreter.runtime import infer_shapes
from .ir.graph import dominator_tree
from .ir.io import load_model, save_model

EXIT_OK, EXIT_UNREPAIRED, EXIT_ERROR = 0, 1, 2


def _pair_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", required=True, help="Source model manifest (reference)")
    p.add_argument("--target", required=True, help="Target model manifest (under repair)")
    p.add_argument("--data", required=True, help="directory of *.tensor input images")


def _config_args(p: argparse.ArgumentParser) -> None:
    d = RepairConfig()
    p.add_argument("--n-sim", type=int, default=d.n_sim)
    p.add_argument("--n-diss", type=int, default=d.n_diss)
    p.add_argument("--analysis-iters", type=int, default=d.analysis_iter_no)
    p.add_argument("--diss-no", type=int, default=d.diss_no)
    p.add_argument("--time-limit", type=float, default=d.time_limit_secs, help="seconds")
    p.add_argument("--significance", type=float, default=d.significance)
    p.add_argument("--kt-threshold", type=float, default=d.kt_fixed_threshold)
    p.add_argument("--element-cap", type=int, default=d.element_cap,
                   help="max output elements tested per layer (0 disables the cap)")
    p.add_argument("--seed", type=int, default=d.seed)


def _config(args: argparse.Namespace) -> RepairConfig:
    return RepairConfig(
        n_sim=args.n_sim, n_diss=args.n_diss, analysis_iter_no=args.analysis_iters, diss_no=args.diss_no,
        time_limit_secs=args.time_limit, significance=args.significance, kt_fixed_threshold=args.kt_threshold,
        seed=args.seed, element_cap=args.element_cap or None,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixcon", description="Localise and repair faults in converted models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repair", help="iteratively repair Target against Source")
    _pair_args(p)
    p.add_argument("--out", required=True, help="path of the repaired model manifest")
    _config_args(p)

    p = sub.add_parser("localize", help="report suspected faults without repairing")
    _pair_args(p)
    p.add_argument("--report", help="write the JSON report here (default: stdout)")
    _config_args(p)

    p = sub.add_parser("eval", help="compare Source and Target labels over a dataset")
    _pair_args(p)
    p.add_argument("--json", action="store_true", help="print per-image results as JSON")

    p = sub.add_parser("inspect", help="summarise a model manifest")
    p.add_argument("model")

    p = sub.add_parser("inject", help="write a copy of a model with a seeded fault")
    p.add_argument("--source", required=True)
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--layer", action="append", default=[], help="target node id (repeatable)")
    p.add_argument("--magnitude", type=float)
    p.add_argument("--variant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--record", help="write the injection record JSON here")

    p = sub.add_parser("desk", help="generate the small reference model and a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--out", required=True, help="model manifest path")
    p.add_argument("--data", required=True, help="dataset directory")
    return parser


def _cmd_repair(args: argparse.Namespace, started: float) -> int:
    cfg = _config(args)
    source, target = load_model(args.source), load_model(args.target)
    dataset = load_dataset(args.data)
    try:
        outcome = run_repair(source, target, dataset, cfg, started_at=started)
    except RepairAborted as exc:
        log_path, _ = metadata_paths(args.out)
        write_repair_log(exc.actions, log_path)
        raise
    write_outcome(outcome, args.out, cfg)
    final = outcome.final_dissimilarity
    print(f"termination: {outcome.termination_reason} after {outcome.state.iteration} iteration(s)")
    if final is not None:
        print(f"final dissimilarity {final:.2f}%")
    return EXIT_OK if outcome.termination_reason == "zero-dissimilarity" else EXIT_UNREPAIRED


def _cmd_localize(args: argparse.Namespace) -> int:
    result = localize(load_model(args.source), load_model(args.target), load_dataset(args.data), _config(args))
    text = json.dumps([r.to_dict() for r in result.reports], indent=2) + "\n"
    if args.report:
        Path(args.report).write_text(text)
        counts = ", ".join(f"{c}={n}" for c, n in result.counts().items())
        print(f"{len(result.reports)} report(s): {counts}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    summary = evaluate(load_model(args.source), load_model(args.target), load_dataset(args.data))
    if args.json:
        print(json.dumps(summary.to_dict(), indent=2))
    else:
        print(f"dissimilarity {summary.dissimilarity_pct:.2f}% over {len(summary.images)} image(s)")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    shapes = infer_shapes(model)
    idom = dominator_tree(model)
    print(f"model {model.name}: input {model.input.name} {list(model.input.shape)} {model.input.layout}, "
          f"output {model.output}")
    print(f"preprocessing {json.dumps(model.preproc.to_dict())}")
    for nid in model.execution_order:
        node = model.node(nid)
        attrs = {k: list(v) if isinstance(v, tuple) else v for k, v in node.attrs.items()}
        weights = {r: list(w.shape) for r, w in node.weights.items()}
        print(f"  {nid:<16} {node.op:<18} -> {list(shapes[nid])}  idom={idom[nid]}"
              + (f"  attrs={attrs}" if attrs else "") + (f"  weights={weights}" if weights else ""))
    return EXIT_OK


def _cmd_inject(args: argparse.Namespace) -> int:
    spec = FaultSpec(args.category, tuple(args.layer), args.magnitude, args.seed, args.variant)
    model, record = inject(load_model(args.source), spec)
    save_model(model, args.out)
    if args.record:
        Path(args.record).write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    print(f"injected {record.spec.category}/{record.spec.variant} at {list(record.touched)} -> {args.out}")
    return EXIT_OK


def _cmd_desk(args: argparse.Namespace) -> int:
    model, dataset = make_desk_model(args.seed, args.images)
    save_model(model, args.out)
    save_dataset(dataset, args.data)
    print(f"wrote {args.out} and {len(dataset)} image(s) to {args.data}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    started = time.monotonic()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "repair":
            return _cmd_repair(args, started)
        handler = {"localize": _cmd_localize, "eval": _cmd_eval, "inspect": _cmd_inspect,
                   "inject": _cmd_inject, "desk": _cmd_desk}[args.command]
        return handler(args)
    except (FixconError, ValueError, OSError) as exc:
        print(f"fixcon: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
