"""Operator command line: generate data, train, gradient-check, evaluate
closed-loop, and render report charts.

Exit status contract: 0 success, 1 validation failure, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import FormatError, SsnError, ValidationError
from .evaluation import evaluate, write_events_csv, write_report_csv, read_report_csv
from .gradcheck import run_suite
from .network import NetworkConfig
from .report import write_report_png, write_report_svg
from .runconfig import RunConfig, load_run_config
from .scenes import (RasterConfig, build_raster_cache, generate_synthetic_scenes, read_dataset,
                     write_dataset, write_raster_cache)
from .training import checkpoint_to_network, fit, load_checkpoint, save_checkpoint, write_loss_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ssntraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes (>= 1)")
    p.add_argument("--seed", type=int, required=True, help="generator seed (>= 0)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="run config file (raster settings for --rasters)")
    p.add_argument("--rasters", action="store_true", help="also write the rasters.bin cache")

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", required=True, help="checkpoint output path")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0, help="base seed for the check suite")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per op")
    p.add_argument("--inject-fault", metavar="OP",
                   help="test hook: corrupt the named op's gradient so the suite fails")

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--report", required=True, help="report CSV output path")
    p.add_argument("--events", help="optional per-event CSV output path")
    p.add_argument("--config", help="run config cross-checked against the checkpoint")
    p.add_argument("--tag", help="model column value (default: checkpoint stem)")

    p = sub.add_parser("report", help="render a report CSV as a grouped bar chart")
    p.add_argument("--in", dest="input", required=True, help="report CSV input path")
    p.add_argument("--svg", required=True, help="SVG output path")
    p.add_argument("--png", help="optional matplotlib PNG output path")
    return parser


def _cmd_gen(args) -> int:
    if args.scenes < 1:
        raise ValidationError(f"--scenes must be >= 1, got {args.scenes}")
    if args.seed < 0:
        raise ValidationError(f"--seed must be >= 0, got {args.seed}")
    run_cfg = load_run_config(args.config) if args.config else None
    dataset = generate_synthetic_scenes(args.seed, args.scenes)
    out = Path(args.out)
    write_dataset(dataset, out)
    if args.rasters:
        rcfg = run_cfg.raster if run_cfg else RasterConfig()
        rcfg.validate()
        write_raster_cache(out / "rasters.bin", build_raster_cache(dataset, rcfg))
    print(f"scenes={len(dataset.scenes)} frames={len(dataset.frames)} agents={len(dataset.agents)}")
    return 0


def _cmd_train(args) -> int:
    run_cfg: RunConfig = load_run_config(args.config)
    dataset = read_dataset(args.data)
    ckpt_path = Path(args.out)
    ckpt, trace = fit(dataset, run_cfg.network, run_cfg.train, run_cfg.raster)
    if ckpt_path.parent and not ckpt_path.parent.exists():
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, ckpt_path)
    write_loss_csv(ckpt_path.parent / "loss.csv", trace)
    epochs = sorted({row[0] for row in trace})
    for e in epochs:
        losses = [row[2] for row in trace if row[0] == e]
        print(f"epoch={e} mean_loss={sum(losses) / len(losses):.6g}")
    print(f"checkpoint={ckpt_path} steps={ckpt.step}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.seed < 0:
        raise ValidationError(f"--seed must be >= 0, got {args.seed}")
    if args.seeds < 1:
        raise ValidationError(f"--seeds must be >= 1, got {args.seeds}")
    results = run_suite(n_seeds=args.seeds, seed_base=args.seed, fault_op=args.inject_fault)
    width = max(len(r.name) for r in results)
    all_pass = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        all_pass &= r.passed
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.threshold:.0e}  {status}")
    print("gradcheck:", "all passed" if all_pass else "FAILURES above")
    return 0 if all_pass else 1


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    rcfg = RasterConfig(size=ckpt.net_cfg.raster_size)
    if args.config:
        run_cfg = load_run_config(args.config)
        if run_cfg.network.raster_size != ckpt.net_cfg.raster_size:
            raise ValidationError(
                f"checkpoint raster size {ckpt.net_cfg.raster_size} does not match config "
                f"raster_size {run_cfg.network.raster_size}")
        rcfg = run_cfg.raster
    graph, _ = checkpoint_to_network(ckpt)
    report, events = evaluate(graph, read_dataset(args.data), rcfg)
    tag = args.tag or Path(args.ckpt).stem
    write_report_csv(args.report, [(tag, report)])
    if args.events:
        write_events_csv(args.events, events)
    mi = report.total_per_1000mi
    print(f"model={tag} frames={report.frames} meters={report.meters:.1f} "
          f"front={report.front} side={report.side} rear={report.rear} "
          f"per_1000mi={'n/a' if mi is None else f'{mi:.3f}'}")
    return 0


def _cmd_report(args) -> int:
    rows = read_report_csv(args.input)
    write_report_svg(args.svg, rows)
    if args.png:
        write_report_png(args.png, rows)
    print(f"svg={args.svg} rows={len(rows)}")
    return 0


_DISPATCH = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    except SsnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
