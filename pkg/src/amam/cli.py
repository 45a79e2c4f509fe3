"""Command-line entry point: ``amam <subcommand>``.

Exit codes: 0 success, 1 a check or invariant failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .aa import FusionMode
from .checks import run_gradchecks, run_invariants
from .io import AmtnFormatError, read_amtn, write_amtn
from .metrics import SchemaError, ap_range, merge_pred_gt, pr_curve_csv
from .pyramid import BACKBONE_CHANNELS, AmamConfig, FeaturePyramid, PyramidError, amam_forward, init_amam, load_amam
from .tensor import ShapeError, Tensor
from .train import LrSchedule, schedule_csv, toy_train, trace_csv

logger = logging.getLogger("amam")

OK, CHECK_FAILED, USAGE_ERROR = 0, 1, 2


@dataclass
class CommandResult:
    exit_code: int
    report_path: Optional[Path] = None


class UsageError(Exception):
    pass


def _write(path: Optional[str], text: str) -> Optional[Path]:
    if not path:
        return None
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="\n") as fh:
        fh.write(text)
    return out


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _mode_list(text: str) -> List[FusionMode]:
    try:
        return [FusionMode(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# -- subcommands -------------------------------------------------------------
def cmd_check(args) -> CommandResult:
    results = run_invariants(args.seed)
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<{width}}  {r.detail}".rstrip())
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} invariants passed")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    return CommandResult(CHECK_FAILED if n_fail else OK, _write(args.out, text))


def cmd_gradcheck(args) -> CommandResult:
    results = run_gradchecks(seed=args.seed, eps=args.eps, fault=args.inject_fault)
    lines = [f"# gradcheck seed={args.seed} eps={args.eps:g} dtype=float64",
             f"{'target':<22} {'max_rel_err':>12} {'tolerance':>10}  status"]
    failed = 0
    for name, err, tol in results:
        ok = err < tol
        failed += not ok
        lines.append(f"{name:<22} {err:>12.3e} {tol:>10.0e}  {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    return CommandResult(CHECK_FAILED if failed else OK, _write(args.out, text))


def _read_pyramid(directory: Path) -> List[np.ndarray]:
    maps = []
    while (directory / f"level{len(maps)}.amtn").exists():
        maps.append(read_amtn(directory / f"level{len(maps)}.amtn"))
    if not maps:
        raise UsageError(f"no level0.amtn in {directory}")
    return maps


def _load_config(path: str) -> AmamConfig:
    try:
        return AmamConfig.from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_forward(args) -> CommandResult:
    cfg = _load_config(args.config)
    params = load_amam(args.params) if args.params else init_amam(cfg)
    arrays = _read_pyramid(Path(args.input))
    try:
        pyr = FeaturePyramid([Tensor(a.astype(np.float64)) for a in arrays])
        out = amam_forward(pyr, params)
    except ShapeError as exc:
        print(f"pyramid invariant violated: {exc}", file=sys.stderr)
        return CommandResult(CHECK_FAILED)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, m in enumerate(out.maps):
        name = f"level{i}.amtn"
        write_amtn(out_dir / name, m.data.astype(np.float32))
        entries.append({"file": name, "shape": list(m.shape)})
    manifest = _write(str(out_dir / "shapes.json"),
                      json.dumps({"config": cfg.to_dict(), "levels": entries}, indent=2) + "\n")
    for e in entries:
        print(f"{e['file']}: {tuple(e['shape'])}")
    return CommandResult(OK, manifest)


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_eval(args) -> CommandResult:
    pred, gt = _load_json(args.pred), _load_json(args.gt)
    try:
        dets, gts = merge_pred_gt(pred, gt)
        report = ap_range(dets, gts, iou_thr=args.iou, conf=args.conf, method=args.method)
    except SchemaError as exc:
        raise UsageError(f"schema violation: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = report.to_json()
    print(text, end="")
    if args.curve:
        _write(args.curve, pr_curve_csv(dets, gts))
    return CommandResult(OK, _write(args.out, text))


def ablation_grid(heads: Sequence[int], modes: Sequence[FusionMode], table_heads: int = 4):
    """(heads, fusion, me, aa) cells: head x fusion sweep, then the ME/AA on-off matrix."""
    cells = [(h, m, True, True) for h in heads for m in modes]
    cells += [(table_heads, FusionMode.ADAPTIVE, me, aa)
              for me, aa in ((False, False), (True, False), (False, True), (True, True))]
    return cells


def cmd_ablate(args) -> CommandResult:
    for h in args.heads + [args.table_heads]:
        if h < 1 or any(c % h for c in BACKBONE_CHANNELS):
            raise UsageError(f"head count {h} does not divide channel widths {BACKBONE_CHANNELS}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["heads", "fusion", "me", "aa", "final_loss"])
    failed = False
    for h, mode, me, aa in ablation_grid(args.heads, args.fusion, args.table_heads):
        cfg = AmamConfig(heads=h, fusion_mode=mode, enabled_me=me, enabled_aa=aa, seed=args.seed)
        trace = toy_train(cfg, args.steps, args.seed, batch_size=args.batch_size)
        final = trace[-1]
        failed |= not np.isfinite(final)
        writer.writerow([h, mode.value, "on" if me else "off", "on" if aa else "off", f"{final:.9g}"])
        logger.info("heads=%d fusion=%s me=%s aa=%s final_loss=%.6f", h, mode.value, me, aa, final)
    text = buf.getvalue()
    print(text, end="")
    return CommandResult(CHECK_FAILED if failed else OK, _write(args.out, text))


def cmd_schedule(args) -> CommandResult:
    try:
        sched = LrSchedule.from_epochs(args.epochs, args.iters_per_epoch, args.warmup_epochs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = schedule_csv(sched)
    path = _write(args.out, text)
    if path is None:
        print(text, end="")
    return CommandResult(OK, path)


def cmd_train(args) -> CommandResult:
    cfg = _load_config(args.config) if args.config else AmamConfig(seed=args.seed)
    lrs: list = []
    losses = toy_train(None if args.baseline else cfg, args.steps, args.seed,
                       batch_size=args.batch_size, lr_trace=lrs)
    text = trace_csv(losses, lrs)
    path = _write(args.out, text)
    if path is None:
        print(text, end="")
    return CommandResult(OK if np.all(np.isfinite(losses)) else CHECK_FAILED, path)


# -- parser ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--out")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("forward", help="enhance an AMTN feature pyramid")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True, help="directory with level0.amtn, level1.amtn, ...")
    p.add_argument("--output", required=True)
    p.add_argument("--params", help="parameter bundle directory (default: seeded init)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("eval", help="precision, recall and AP from detection JSON")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--method", choices=["interp101", "area"], default="interp101")
    p.add_argument("--out")
    p.add_argument("--curve", help="write the PR curves as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="toy-train every head/fusion/ME/AA configuration")
    p.add_argument("--heads", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--fusion", type=_mode_list, default=list(FusionMode))
    p.add_argument("--table-heads", type=int, default=4)
    p.add_argument("--steps", type=_positive, default=20)
    p.add_argument("--batch-size", type=_positive, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("schedule", help="emit the learning-rate curve")
    p.add_argument("--epochs", type=_positive, default=500)
    p.add_argument("--iters-per-epoch", type=_positive, default=1)
    p.add_argument("--warmup-epochs", type=int, default=3)
    p.add_argument("--emit", choices=["csv"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="toy training run; writes iter,lr,loss CSV")
    p.add_argument("--config")
    p.add_argument("--steps", type=_positive, default=200)
    p.add_argument("--batch-size", type=_positive, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", action="store_true", help="skip AMAM (backbone + head only)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(int(exc.code or 0))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, AmtnFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(USAGE_ERROR)
    except PyramidError as exc:
        print(f"pyramid invariant violated: {exc}", file=sys.stderr)
        return CommandResult(CHECK_FAILED)


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv).exit_code)


if __name__ == "__main__":
    main()
