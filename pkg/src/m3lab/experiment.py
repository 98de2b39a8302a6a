"""End-to-end runs: data -> pyramid check -> train -> evaluate -> oracle -> roofline.

Every run appends records to ``<out_dir>/runs.jsonl``; artifacts for a run live
in ``<out_dir>/<run_id>/``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import datetime as dt
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, evaluate, io, pyramid, roofline, tasks
from .config import ExperimentConfig
from .data import TensorData
from .model import ToyLMM
from .training import train

log = logging.getLogger(__name__)

RUN_LOG = "runs.jsonl"


class RunExistsError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class RunRecord:
    run_id: str
    config: dict
    config_hash: str
    checkpoint_hash: str | None = None
    metrics: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    status: str = "running"

    def to_dict(self) -> dict:
        return {
            "event": "run",
            "run_id": self.run_id,
            "status": self.status,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "metrics": self.metrics,
            "started": self.started,
            "finished": self.finished,
            "config": self.config,
        }


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def append_log(out_dir: Path, record: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RUN_LOG, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_log(out_dir: Path) -> list[dict]:
    path = Path(out_dir) / RUN_LOG
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def completed(out_dir: Path, run_id: str) -> bool:
    return any(r.get("event") == "run" and r["run_id"] == run_id and r["status"] == "completed"
               for r in read_log(out_dir))


def plan(cfg: ExperimentConfig) -> dict:
    return {
        "run_id": cfg.run.run_id,
        "config_hash": cfg.digest(),
        "stages": ["data", *cfg.run.stages],
        "schedule": cfg.model_config().schedule,
        "train_steps": cfg.train.init_steps + cfg.train.steps,
    }


# -- stage helpers, also used directly by the CLI ----------------------------

def make_data(cfg: ExperimentConfig, run_dir: Path | None = None):
    train_set, test_set = tasks.generate_dataset(
        cfg.run.seed, cfg.data.train_counts, cfg.data.test_counts, cfg.task)
    if run_dir is not None:
        tasks.save_dataset(run_dir / "train.jsonl", train_set)
        tasks.save_dataset(run_dir / "test.jsonl", test_set)
    return TensorData(train_set, cfg.task), TensorData(test_set, cfg.task)


def pyramid_check(data: TensorData, limit: int = 64) -> dict:
    """Schedule and worst nesting error over the patch-mean grids of ``data``."""
    task = data.task
    g, p = task.grid, task.patch
    worst = 0.0
    schedule: list[int] = []
    for img in data.images[:limit].numpy().astype(np.float64):
        grid = img.reshape(g, p, g, p, -1).mean(axis=(1, 3))
        pyr = pyramid.build_pyramid(grid)
        schedule = pyr.schedule
        for coarse, fine in zip(pyr.scales, pyr.scales[1:]):
            ch, cw = coarse.shape[:2]
            bh, bw = fine.shape[0] // ch, fine.shape[1] // cw
            blocks = fine.reshape(ch, bh, cw, bw, -1).mean(axis=(1, 3))
            worst = max(worst, float(np.max(np.abs(blocks - coarse))))
    return {"schedule": schedule, "max_nesting_error": worst}


def write_loss_csv(path: Path, history: list[dict], schedule: Sequence[int]) -> None:
    kinds = tasks.KINDS
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "phase", "loss", *[f"acc_{kind}_{k}" for kind in kinds for k in schedule]])
        for row in history:
            acc = row.get("accuracy")
            cells = [""] * (len(kinds) * len(schedule))
            if acc:
                cells = [f"{acc.get(kind, {}).get(k, float('nan')):.6f}" for kind in kinds for k in schedule]
            w.writerow([row["step"], row["phase"], repr(row["loss"]), *cells])


def write_accuracy_csv(path: Path, mat: np.ndarray, kinds: np.ndarray, schedule: Sequence[int]) -> dict:
    out = {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", *schedule])
        for kind in ["all", *tasks.KINDS]:
            rows = mat if kind == "all" else mat[kinds == kind]
            if len(rows) == 0:
                continue
            acc = rows.mean(axis=0)
            out[kind] = {int(k): float(a) for k, a in zip(schedule, acc)}
            w.writerow([kind, *(f"{a:.6f}" for a in acc)])
    return out


def evaluation_outputs(model: ToyLMM, data: TensorData, out_dir: Path) -> dict:
    """Correctness matrix, accuracy table and oracle reports for ``data``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = model.cfg.schedule
    mat = evaluate.correctness_matrix(model, data, schedule)
    ids = [f"{t.kind}:{t.seed}" for t in data.instances]
    analysis.CorrectnessMatrix(schedule, mat, ids).to_csv(out_dir / "correctness.csv")
    acc = write_accuracy_csv(out_dir / "accuracy.csv", mat, data.kinds, schedule)
    oracle = {}
    for kind in ["all", *tasks.KINDS]:
        rows = mat if kind == "all" else mat[data.kinds == kind]
        if len(rows):
            oracle[kind] = analysis.oracle_aggregate(analysis.CorrectnessMatrix(schedule, rows)).to_dict()
            del oracle[kind]["chosen_scale"], oracle[kind]["correct"]
    (out_dir / "oracle.json").write_text(json.dumps(oracle, indent=2) + "\n")
    return {"accuracy": acc, "oracle": oracle}


def compare_baselines(
    model: ToyLMM,
    data: TensorData,
    ks: Sequence[int],
    baseline_model: ToyLMM | None = None,
) -> list[list]:
    """Accuracy of pyramid tokens vs. training-free pooling and sampling at
    matched token counts. One row per method, one column per ``k``.

    ``baseline_model`` (default: ``model``) is the checkpoint the three
    training-free baselines run on.
    """
    schedule = model.cfg.schedule
    for k in ks:
        pyramid.scale_index(schedule, k)
    base = baseline_model or model
    rows = []
    for method in evaluate.METHODS:
        m = model if method == "m3" else base
        rows.append([method, *(float(evaluate.correctness(m, data, k, method).mean()) for k in ks)])
    return rows


def write_compare_csv(path: Path | None, rows: list[list], ks: Sequence[int]) -> str:
    lines = [",".join(["method", *map(str, ks)])]
    lines += [",".join([r[0], *(f"{v:.6f}" for v in r[1:])]) for r in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def write_roofline_csv(path: Path | None, cfg: roofline.RooflineConfig, visual: Sequence[int], text_tokens: int) -> str:
    rows = roofline.cost_table(cfg, visual, text_tokens)
    lines = [",".join(roofline.TABLE_HEADER)]
    lines += [f"{v},{n},{fl:.4f},{t:.4f},{mem:.4f},{act:.4f}" for v, n, fl, t, mem, act in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# -- orchestration -----------------------------------------------------------

def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    force: bool = False,
    dry_run: bool = False,
) -> RunRecord | dict:
    """Execute the configured stages. ``dry_run`` returns the plan and touches
    nothing on disk. A completed ``run_id`` is only re-run with ``force``."""
    out_dir = Path(out_dir)
    the_plan = plan(cfg)
    if dry_run:
        return the_plan
    if completed(out_dir, cfg.run.run_id) and not force:
        raise RunExistsError(f"run {cfg.run.run_id!r} already completed in {out_dir}; pass --force to redo it")
    run_dir = out_dir / cfg.run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(cfg.run.run_id, cfg.to_dict(), cfg.digest(), started=_now())
    append_log(out_dir, {"event": "start", "run_id": record.run_id, "config_hash": record.config_hash,
                         "time": record.started, "plan": the_plan})

    stage = "data"
    try:
        train_data, test_data = make_data(cfg, run_dir)
        model = None
        for stage in cfg.run.stages:
            log.info("run %s: stage %s", cfg.run.run_id, stage)
            if stage == "pyramid":
                info = pyramid_check(test_data)
                (run_dir / "pyramid.json").write_text(json.dumps(info, indent=2) + "\n")
                record.metrics["pyramid"] = info
            elif stage == "train":
                model, history = train(train_data, cfg.train, cfg.model_config())
                write_loss_csv(run_dir / "loss.csv", history, model.cfg.schedule)
                record.checkpoint_hash = io.save_checkpoint(
                    run_dir / "checkpoint.bin", model, {"run_id": cfg.run.run_id, "config_hash": record.config_hash})
                record.metrics["final_loss"] = history[-1]["loss"] if history else None
            elif stage in ("evaluate", "oracle", "compare"):
                if model is None:
                    ckpt = run_dir / "checkpoint.bin"
                    if not ckpt.exists():
                        raise FileNotFoundError("no trained checkpoint; include the train stage first")
                    model = io.load_checkpoint(ckpt)
                if stage == "compare":
                    ks = list(cfg.run.compare_k)
                    rows = compare_baselines(model, test_data.subset("local-glyph"), ks)
                    write_compare_csv(run_dir / "compare.csv", rows, ks)
                    record.metrics["compare_local_glyph"] = {r[0]: dict(zip(map(str, ks), r[1:])) for r in rows}
                elif "evaluation" not in record.metrics:
                    # evaluate and oracle share one pass over the test set
                    ev = evaluation_outputs(model, test_data, run_dir)
                    record.metrics["evaluation"] = ev["accuracy"]
                    record.metrics["oracle"] = ev["oracle"]
            elif stage == "roofline":
                write_roofline_csv(run_dir / "roofline.csv", cfg.roofline,
                                   cfg.run.visual_tokens, cfg.run.text_tokens)
                record.metrics["roofline"] = [
                    dict(zip(roofline.TABLE_HEADER, r))
                    for r in roofline.cost_table(cfg.roofline, cfg.run.visual_tokens, cfg.run.text_tokens)
                ]
    except Exception as e:
        record.status = "failed"
        record.finished = _now()
        append_log(out_dir, {"event": "stage_failed", "run_id": record.run_id, "stage": stage,
                             "error": f"{type(e).__name__}: {e}", "time": record.finished})
        append_log(out_dir, record.to_dict())
        raise StageError(stage, e) from e
    record.status = "completed"
    record.finished = _now()
    (run_dir / "metrics.json").write_text(json.dumps(record.metrics, indent=2, sort_keys=True) + "\n")
    append_log(out_dir, record.to_dict())
    return record
