"""``m3`` command line: pyramid | train | eval | oracle | roofline | budget | compare | run.

Exit status: 0 on success, 1 on invalid input or configuration, 2 when a
valid request fails while running.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys

from . import analysis, io, pyramid, roofline, tasks
from .config import ConfigError, load_config
from .data import TensorData
from .evaluate import accuracy_by_kind
from .experiment import (
    RunExistsError,
    StageError,
    compare_baselines,
    evaluation_outputs,
    make_data,
    run_experiment,
    write_compare_csv,
    write_loss_csv,
    write_roofline_csv,
)
from .training import train

log = logging.getLogger("m3lab")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pyramid(args) -> int:
    grid = io.read_grid(args.input)
    pyr = pyramid.build_pyramid(grid.astype("float64"))
    if args.schedule_only:
        print(json.dumps(pyr.schedule))
        return 0
    out = _out_dir(args)
    for k, scale in zip(pyr.schedule, pyr.scales):
        io.write_grid(out / f"scale_{k}.bin", scale)
    print(json.dumps({"schedule": pyr.schedule, "out_dir": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    train_data, test_data = make_data(cfg, out)
    model, history = train(train_data, cfg.train, cfg.model_config(),
                           evaluate=lambda m: accuracy_by_kind(m, test_data))
    write_loss_csv(out / "loss.csv", history, model.cfg.schedule)
    digest = io.save_checkpoint(out / "checkpoint.bin", model, {"config_hash": cfg.digest()})
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "sha256": digest,
                      "final_loss": history[-1]["loss"] if history else None}))
    return 0


def _load_eval_data(args, model) -> TensorData:
    cfg = _config(args)
    if (cfg.task.grid, cfg.task.patch, cfg.task.channels) != (model.cfg.grid, model.cfg.patch, model.cfg.image_channels):
        raise ValueError("task geometry in the config does not match the checkpoint")
    if args.data:
        return TensorData(tasks.load_dataset(args.data), cfg.task)
    return make_data(cfg)[1]


def cmd_eval(args) -> int:
    model = io.load_checkpoint(args.checkpoint)
    data = _load_eval_data(args, model)
    res = evaluation_outputs(model, data, _out_dir(args))
    print(json.dumps(res["accuracy"], indent=2))
    return 0


def cmd_oracle(args) -> int:
    matrix = analysis.CorrectnessMatrix.from_csv(args.matrix)
    report = analysis.oracle_aggregate(matrix)
    text = report.to_json()
    if args.out_dir != "m3_out":
        report.to_json(_out_dir(args) / "oracle.json")
    print(text)
    return 0


def cmd_roofline(args) -> int:
    cfg = roofline.RooflineConfig()
    text_tokens = args.text_tokens
    if args.config:
        cfg = load_config(args.config).roofline
    visual = args.table if args.table else [args.tokens]
    sys.stdout.write(write_roofline_csv(None, cfg, visual, text_tokens))
    return 0


def cmd_budget(args) -> int:
    rows = analysis.budget_allocations(args.budget, args.schedule)
    print("units,tokens_per_unit")
    for units, size in rows:
        print(f"{units},{size}")
    return 0


def cmd_compare(args) -> int:
    model = io.load_checkpoint(args.checkpoint)
    data = _load_eval_data(args, model)
    if args.kind != "all":
        data = data.subset(args.kind)
    baseline = io.load_checkpoint(args.baseline_checkpoint) if args.baseline_checkpoint else None
    rows = compare_baselines(model, data, args.k, baseline)
    path = _out_dir(args) / "compare.csv"
    sys.stdout.write(write_compare_csv(path, rows, args.k))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, args.out_dir, force=args.force, dry_run=args.dry_run)
    if args.dry_run:
        print(json.dumps(result, indent=2))
    else:
        print(json.dumps({"run_id": result.run_id, "status": result.status,
                          "checkpoint_hash": result.checkpoint_hash}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (see docs/config.md)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for outputs (default m3_out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="m3", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pyramid", parents=[common], help="pool a grid file into nested scales")
    s.add_argument("input")
    s.add_argument("--schedule-only", action="store_true")
    s.set_defaults(func=cmd_pyramid)

    s = sub.add_parser("train", parents=[common], help="train the toy model")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "per-scale accuracy and correctness matrix"),
                              ("compare", cmd_compare, "pyramid tokens vs. sampling baselines")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", default=None, help="test set JSONL (default: regenerate from config)")
        s.set_defaults(func=func)
    s.add_argument("--k", type=_ints, default=[1, 9, 36, 144])
    s.add_argument("--kind", choices=["all", *tasks.KINDS], default="local-glyph")
    s.add_argument("--baseline-checkpoint", default=None)

    s = sub.add_parser("oracle", parents=[common], help="oracle scale selection on a correctness CSV")
    s.add_argument("--matrix", required=True)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("roofline", parents=[common], help="prefill cost table")
    s.add_argument("--tokens", type=int, default=576, help="visual tokens")
    s.add_argument("--table", type=_ints, default=None, help="comma-separated visual token counts")
    s.add_argument("--text-tokens", type=int, default=30)
    s.set_defaults(func=cmd_roofline)

    s = sub.add_parser("budget", parents=[common], help="frames vs. tokens-per-frame under a budget")
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--schedule", type=_ints, default=[1, 9, 36, 144, 576])
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("run", parents=[common], help="full experiment from a config file")
    s.add_argument("--force", action="store_true", help="redo a completed run id")
    s.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("out_dir", "m3_out"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if isinstance(e.__cause__, (ValueError, ConfigError)) else 2
    except (ValueError, FileNotFoundError, ConfigError, RunExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
