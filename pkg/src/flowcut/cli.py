"""``flowcut`` command line: trace, analyze, prune, flops.

Exit codes: 0 success, 1 runtime/data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import efficiency, flow
from .encoder import EncoderConfig, build_encoder, generate_trace, load_input, synthetic_input
from .engine import PruneConfig, ScheduleError, run_schedule, single_layer_config
from .tensor import TraceError, read_trace, write_trace

MANIFEST = "manifest.json"


class DataError(Exception):
    """Runtime/data failure -> exit code 1."""


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        rows, cols = int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like RxC, got {text!r}") from None
    if rows <= 0 or cols <= 0:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


def _stage(text: str):
    try:
        loc, tgt = text.rsplit(":", 1)
        target = int(tgt)
    except ValueError:
        raise argparse.ArgumentTypeError(f"stage must look like LOCATION:TARGET, got {text!r}") from None
    if loc not in ("penultimate", "post"):
        try:
            loc = int(loc)
        except ValueError:
            raise argparse.ArgumentTypeError("stage location must be a layer index, 'penultimate' or 'post'") from None
    return loc, target


def _positive(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _encoder_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("encoder")
    g.add_argument("--layers", type=_positive, default=12)
    g.add_argument("--heads", type=_positive, default=4)
    g.add_argument("--dim", type=_positive, default=64, help="model dimension")
    g.add_argument("--mlp-dim", type=_positive, default=256)
    g.add_argument("--grid", type=_grid, default=(8, 8), help="patch grid RxC (default 8x8)")
    g.add_argument("--seed", type=_nonneg, default=0)
    g.add_argument("--cls", action=argparse.BooleanOptionalAction, default=True, help="prepend a CLS token")
    g.add_argument("--weight-range", type=float, default=0.05, help="weights ~ U[-r, r)")


def _encoder_config(args, parser) -> EncoderConfig:
    cfg = EncoderConfig(
        layers=args.layers,
        heads=args.heads,
        model_dim=args.dim,
        mlp_dim=args.mlp_dim,
        grid_rows=args.grid[0],
        grid_cols=args.grid[1],
        has_cls=args.cls,
        seed=args.seed,
        weight_range=args.weight_range,
    )
    try:
        cfg.validate()
    except ValueError as e:
        parser.error(str(e))
    return cfg


def _write_manifest(outdir: Path, args, argv, inputs, outputs) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "parser")}
    flags = json.loads(json.dumps(flags, default=str))
    manifest = {
        "tool": "flowcut",
        "version": __version__,
        "subcommand": args.command,
        "argv": list(argv),
        "flags": flags,
        "seed": flags.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", newline="\n")


def _load_trace(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"trace not found: {p}")
    try:
        return read_trace(p)
    except TraceError as e:
        raise DataError(f"{e.code}: {e}") from None


def cmd_trace(args, argv) -> int:
    cfg = _encoder_config(args, args.parser)
    trace = generate_trace(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace, out)
    _write_manifest(out.parent, args, argv, [], [out])
    print(f"wrote {out} ({trace.num_layers} layers, {trace.num_tokens} tokens)")
    return 0


def cmd_analyze(args, argv) -> int:
    trace = _load_trace(args.trace)
    outdir = Path(args.out)
    kind = args.kind
    if kind in ("density", "criteria") and not trace.has_qkv:
        raise DataError(f"{kind} analysis needs Q/K/V but the trace lacks QKV (attention only)")
    if kind == "entropy":
        text = flow.entropy_csv(trace)
    elif kind == "flow":
        text = flow.flow_csv(trace)
    elif kind == "density":
        text = flow.density_csv(trace)
    else:
        layer = trace.num_layers - 2 if args.layer is None else args.layer
        if not 0 <= layer < trace.num_layers:
            raise DataError(f"layer {layer} out of range for {trace.num_layers}-layer trace")
        profile = flow.criteria_report(trace, layer, args.q)
        text = flow.criteria_csv(profile)
        print(f"layer {layer}: {len(profile.contradictory)} contradictory tokens; spearman {profile.correlations}")
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / f"{kind}.csv"
    out.write_text(text, newline="\n")
    _write_manifest(outdir, args, argv, [args.trace], [out])
    print(f"wrote {out}")
    return 0


def _prune_config(args, parser) -> PruneConfig:
    if args.baseline == "single-layer":
        return single_layer_config(args.target)
    if not 0.0 <= args.history_weight <= 1.0:
        parser.error("--history-weight must lie in [0, 1]")
    stages = tuple(args.stage or ())
    if args.two_stage:
        if stages:
            parser.error("--two-stage and --stage are mutually exclusive")
        stages = (("penultimate", 2 * args.target), ("post", args.target))
    fixed = args.baseline == "fixed-ratio"
    return PruneConfig(
        target=args.target,
        interval=args.interval,
        weight_history=args.history_weight,
        weight_current=1.0 - args.history_weight,
        adaptive_count=not (args.no_adaptive or fixed),
        cumulative=not (args.no_cumulative or fixed),
        multi_criteria=not (args.no_multicriteria or fixed),
        single_event=args.single_event,
        stages=stages,
    )


def cmd_prune(args, argv) -> int:
    cfg = _prune_config(args, args.parser)
    inputs = []
    if args.live:
        enc = _encoder_config(args, args.parser)
        state = build_encoder(enc)
        load_input(state, synthetic_input(enc))
        source = state
    else:
        source = _load_trace(args.trace)
        inputs.append(args.trace)
    try:
        report = run_schedule(source, cfg)
    except ScheduleError as e:
        raise DataError(str(e)) from None
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rj, dc = outdir / "report.json", outdir / "decisions.csv"
    rj.write_text(report.to_json(scores=args.scores), newline="\n")
    dc.write_text(report.decisions_csv(), newline="\n")
    _write_manifest(outdir, args, argv, inputs, [rj, dc])
    final = len(report.final_kept)
    print(f"{len(report.decisions)} prune events, {report.initial_tokens} -> {final} tokens; wrote {rj}")
    if final != cfg.target:
        print(f"error: final count {final} != target {cfg.target}", file=sys.stderr)
        return 1
    return 0


def cmd_flops(args, argv) -> int:
    parser = args.parser
    if args.model_preset:
        try:
            dims = efficiency.preset(args.model_preset)
        except KeyError as e:
            parser.error(str(e.args[0]))
    else:
        if None in (args.llm_layers, args.hidden, args.intermediate):
            parser.error("give --model-preset or all of --llm-layers, --hidden, --intermediate")
        vision = None
        vis = (args.vision_layers, args.vision_hidden, args.vision_intermediate)
        if any(v is not None for v in vis):
            if None in vis:
                parser.error("vision tower needs --vision-layers, --vision-hidden and --vision-intermediate")
            vision = efficiency.StackDims(*vis)
        try:
            dims = efficiency.ModelDims(
                args.llm_layers, args.hidden, args.intermediate, vision=vision, vision_tokens=args.vision_tokens or 0
            )
        except ValueError as e:
            parser.error(str(e))
    if args.model_preset and args.vision_tokens is not None:
        dims = efficiency.ModelDims(**{**dims.__dict__, "vision_tokens": args.vision_tokens})
    visual = dims.max_visual_tokens if args.visual_tokens is None else args.visual_tokens
    sched = efficiency.uniform_schedule(dims, visual, args.text_tokens)
    result = efficiency.flops_breakdown(dims, sched)
    result["tflops"] = result["total_flops"] / 1e12
    result["assumptions"]["preset"] = args.model_preset
    if args.compare_to is not None:
        ref = efficiency.flops_prefill(dims, efficiency.uniform_schedule(dims, args.compare_to, args.text_tokens))
        result["reference_visual_tokens"] = args.compare_to
        result["ratio_to_reference"] = result["total_flops"] / ref if ref else None
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, newline="\n")
        _write_manifest(out.parent, args, argv, [], [out])
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcut", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowcut {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="generate a trace from the toy encoder")
    _encoder_flags(p)
    p.add_argument("--out", required=True, help="trace file to write")
    p.set_defaults(func=cmd_trace, parser=p)

    p = sub.add_parser("analyze", help="information-flow diagnostics as CSV")
    p.add_argument("kind", choices=["flow", "entropy", "density", "criteria"])
    p.add_argument("trace")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer", type=int, default=None, help="criteria layer (default penultimate)")
    p.add_argument("--q", type=float, default=0.2, help="criteria top/bottom fraction")
    p.set_defaults(func=cmd_analyze, parser=p)

    p = sub.add_parser("prune", help="run the FlowCut schedule")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="trace file (trace mode)")
    src.add_argument("--live", action="store_true", help="drive the toy encoder directly")
    _encoder_flags(p)
    p.add_argument("--target", type=_positive, required=True)
    p.add_argument("--interval", type=_positive, default=2)
    p.add_argument("--history-weight", type=float, default=0.5, help="history weight; current = 1 - this")
    p.add_argument("--no-adaptive", action="store_true")
    p.add_argument("--no-cumulative", action="store_true")
    p.add_argument("--no-multicriteria", action="store_true")
    p.add_argument("--single-event", action="store_true", help="prune only at each stage's last layer")
    p.add_argument("--baseline", choices=["single-layer", "fixed-ratio"])
    p.add_argument("--stage", type=_stage, action="append", help="LOCATION:TARGET, repeatable")
    p.add_argument("--two-stage", action="store_true", help="2*target at the penultimate layer, then target post-encoder")
    p.add_argument("--scores", action="store_true", help="include score vectors in report.json")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prune, parser=p)

    p = sub.add_parser("flops", help="prefill FLOPs estimate")
    p.add_argument("--model-preset")
    p.add_argument("--llm-layers", type=_positive)
    p.add_argument("--hidden", type=_positive)
    p.add_argument("--intermediate", type=_positive)
    p.add_argument("--vision-layers", type=_positive)
    p.add_argument("--vision-hidden", type=_positive)
    p.add_argument("--vision-intermediate", type=_positive)
    p.add_argument("--vision-tokens", type=_nonneg)
    p.add_argument("--visual-tokens", type=_nonneg)
    p.add_argument("--text-tokens", type=_nonneg, default=efficiency.DEFAULT_TEXT_TOKENS)
    p.add_argument("--compare-to", type=_nonneg, help="reference visual-token count for a ratio")
    p.add_argument("--out", help="JSON file (stdout if omitted)")
    p.set_defaults(func=cmd_flops, parser=p)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
