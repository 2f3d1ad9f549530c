"""Run orchestration: data generation, training, evaluation, dynamics, ablation.

Every command is deterministic given (config, seed): rerunning into a
fresh directory reproduces the output tree byte for byte.  Run directory
layout is fixed: config.ini copy, checkpoints/, logs/, reports/.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import evalharness as ev
from . import synthdata as sd
from .config import RunConfig, load_config, save_config
from .errors import DependencyError, NumericError, ValidationError
from .model import VLModel, load_checkpoint, save_checkpoint
from .objectives import LOSS_COMPONENTS, SgdOptimizer, training_step
from .seeding import rng_for

LOSS_LOG_HEADER = ("step", "batch_kind", *LOSS_COMPONENTS, "total", "active")

LOSS_ARMS = {
    "A": dict(use_vma=False, use_bbox=False, use_pevl_tokens=False),
    "A+VMA": dict(use_vma=True, use_bbox=False, use_pevl_tokens=False),
    "A+bbox": dict(use_vma=False, use_bbox=True, use_pevl_tokens=False),
    "full": dict(use_vma=True, use_bbox=True, use_pevl_tokens=False),
    "pevl": dict(use_vma=False, use_bbox=False, use_pevl_tokens=True),
}


def prepare_run_dir(config: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_copy = out_dir / "config.ini"
    if config_copy.exists():
        existing = load_config(config_copy)
        if existing.config_hash() != config.config_hash():
            raise DependencyError(
                f"run directory {out_dir} belongs to config {existing.config_hash()}, "
                f"not {config.config_hash()}"
            )
    else:
        save_config(config, config_copy)
    for sub in ("checkpoints", "logs", "reports"):
        (out_dir / sub).mkdir(exist_ok=True)
    return out_dir


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"step_{step:06d}.ckpt"


# -- gen-data ----------------------------------------------------------------------


def run_gen_data(config: RunConfig, out_dir: Path) -> dict[str, Path]:
    out_dir = prepare_run_dir(config, out_dir)
    data_dir = out_dir / "data"
    data_dir.mkdir(exist_ok=True)
    chash = config.config_hash()
    sources = config.source_set()
    written: dict[str, Path] = {}

    if "captions" in sources:
        captions = sd.caption_stream(config.data_seed, config.caption_count,
                                     config.patch_grid)
        path = data_dir / "captions.tsv"
        sd.write_dataset(path, captions, config.data_seed, header=f"config_hash={chash}")
        _assert_reproducible(path, captions, config.patch_grid)
        written["captions"] = path
    kinds = [k for k in sd.DETECTION_KINDS if f"{k}s" in sources]
    if kinds:
        detections = sd.detection_stream(config.data_seed, config.detection_scene_count,
                                         kinds, config.patch_grid)
        path = data_dir / "detections.tsv"
        sd.write_dataset(path, detections, config.data_seed, header=f"config_hash={chash}")
        _assert_reproducible(path, detections, config.patch_grid)
        written["detections"] = path
    manifest = ev.default_manifest(config.eval_seed, config.eval_per_subtask,
                                   config.patch_grid, config.retrieval_count)
    manifest["config_hash"] = chash
    manifest_path = data_dir / "eval_manifest.json"
    ev.write_manifest(manifest_path, manifest)
    written["eval_manifest"] = manifest_path
    return written


def _assert_reproducible(path: Path, samples, grid_size: int) -> None:
    records = sd.read_dataset(path, grid_size)
    if len(records) != len(samples):
        raise NumericError(f"dataset {path} does not reproduce: record count differs")
    for rec, sample in zip(records, samples):
        if rec.text != sample.text or not np.array_equal(rec.grid, sample.scene.grid):
            raise NumericError(f"dataset {path} does not reproduce from (seed, index)")


# -- train -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: VLModel
    checkpoint_steps: list[int]
    loss_log: Path


def run_training(config: RunConfig, out_dir: Path) -> TrainResult:
    out_dir = prepare_run_dir(config, out_dir)
    chash = config.config_hash()
    model = VLModel(config.model_config(), seed=config.seed)
    ablation = config.ablation_config()
    optimizer = SgdOptimizer(model.parameters(), lr=config.learning_rate,
                             clip_norm=config.clip_norm)
    batches = sd.sampler_for_sources(
        seed=config.data_seed,
        sources=sorted(config.source_set()),
        steps=config.steps,
        caption_count=config.caption_count,
        detection_scene_count=config.detection_scene_count,
        caption_batch=config.caption_batch,
        detection_batch=config.detection_batch,
        grid_size=config.patch_grid,
    )
    log_path = out_dir / "logs" / "losses.tsv"
    steps_saved = []
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(f"# config_hash={chash}\n")
        log.write("\t".join(LOSS_LOG_HEADER) + "\n")
        for index, batch in enumerate(batches):
            step = index + 1
            bundle = training_step(model, batch, ablation, optimizer,
                                   rng_for(config.seed, "step", step))
            if not np.isfinite(bundle.total):
                raise NumericError(f"non-finite loss at step {step}")
            fields = [str(step), batch.kind]
            fields += [f"{bundle.component(name):.17g}" for name in LOSS_COMPONENTS]
            fields += [f"{bundle.total:.17g}", ",".join(sorted(bundle.active))]
            log.write("\t".join(fields) + "\n")
            if step % config.cadence == 0:
                save_checkpoint(model, checkpoint_path(out_dir, step), chash)
                steps_saved.append(step)
    return TrainResult(model=model, checkpoint_steps=steps_saved, loss_log=log_path)


# -- eval --------------------------------------------------------------------------


def _load_model_at(config: RunConfig, ckpt: Path) -> tuple[VLModel, int]:
    model = VLModel(config.model_config(), seed=config.seed)
    load_checkpoint(model, ckpt, expect_hash=config.config_hash())
    name = Path(ckpt).stem
    step = int(name.split("_")[1]) if "_" in name else 0
    return model, step


def run_eval(config: RunConfig, ckpt: Path, out_dir: Path,
             manifest: dict | None = None) -> ev.EvalReport:
    out_dir = prepare_run_dir(config, out_dir)
    model, step = _load_model_at(config, ckpt)
    if manifest is None:
        manifest = ev.default_manifest(config.eval_seed, config.eval_per_subtask,
                                       config.patch_grid, config.retrieval_count)
    chash = config.config_hash()
    report = ev.run_benchmark(
        model, manifest, checkpoint_step=step,
        dump_path=out_dir / "reports" / f"scores_step_{step:06d}.tsv",
    )
    ev.write_report(out_dir / "reports" / f"eval_step_{step:06d}.tsv", report, chash)
    ev.write_report_json(out_dir / "reports" / f"eval_step_{step:06d}.json", report, chash)
    return report


# -- dynamics ------------------------------------------------------------------------


def run_dynamics(config: RunConfig, run_dir: Path) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    if not ckpt_dir.is_dir():
        raise DependencyError(f"no checkpoints directory under {run_dir}")
    checkpoints = sorted(ckpt_dir.glob("step_*.ckpt"))
    if not checkpoints:
        raise DependencyError(f"no checkpoints found under {ckpt_dir}")
    manifest = ev.default_manifest(config.eval_seed, config.eval_per_subtask,
                                   config.patch_grid, config.retrieval_count)

    def evaluate(step: int) -> dict[str, float]:
        model, _ = _load_model_at(config, checkpoint_path(run_dir, step))
        return ev.run_benchmark(model, manifest, checkpoint_step=step).metrics

    steps = [int(p.stem.split("_")[1]) for p in checkpoints]
    expected = list(range(config.cadence, config.steps + 1, config.cadence))
    if steps != expected:
        raise DependencyError(
            f"checkpoints at steps {steps} do not match cadence {config.cadence} "
            f"over {config.steps} steps"
        )
    table = dyn.track(config.steps, config.cadence, evaluate)
    chash = config.config_hash()
    trajectory_path = run_dir / "reports" / "trajectory.tsv"
    correlation_path = run_dir / "reports" / "correlations.tsv"
    dyn.write_trajectory(trajectory_path, table, chash)
    # correlation needs at least 3 checkpoints; below that only the trajectory is written
    report = dyn.correlate_tasks(table) if len(table.steps) >= 3 else dyn.CorrelationReport()
    dyn.write_correlations(correlation_path, report, chash)
    return trajectory_path, correlation_path


# -- ablation grid --------------------------------------------------------------------


def parse_grid_spec(spec: str) -> list[tuple[str, frozenset]]:
    """Arms like "full:all; A:captions; A+VMA:captions+region_descriptions"."""
    arms = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ValidationError(f"grid arm {chunk!r} is missing ':' separator")
        loss_tag, source_field = (part.strip() for part in chunk.split(":", 1))
        if loss_tag not in LOSS_ARMS:
            raise ValidationError(
                f"unknown loss arm {loss_tag!r}, expected one of {sorted(LOSS_ARMS)}")
        if source_field == "all":
            sources = frozenset(
                ("captions", "object_labels", "attribute_labels", "region_descriptions"))
        else:
            sources = frozenset(s.strip() for s in source_field.split("+") if s.strip())
        arms.append((loss_tag, sources))
    if not arms:
        raise ValidationError("grid spec contains no arms")
    return arms


def arm_name(loss_tag: str, sources: frozenset) -> str:
    short = {"captions": "cap", "object_labels": "obj",
             "attribute_labels": "attr", "region_descriptions": "region"}
    tag = loss_tag.replace("+", "_").lower()
    return f"{tag}__{'-'.join(short[s] for s in sorted(sources))}"


def arm_config(base: RunConfig, loss_tag: str, sources: frozenset) -> RunConfig:
    from dataclasses import replace

    return replace(base, sources=",".join(sorted(sources)), **LOSS_ARMS[loss_tag])


SUMMARY_METRICS = (
    "svo_avg", "foil_avg", "relation_statement",
    "relation_swap_text", "relation_swap_image", "relation_swap_group",
    "retrieval_tr@1", "retrieval_ir@1",
)


def run_ablation(base: RunConfig, grid_spec: str, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arms = parse_grid_spec(grid_spec)
    rows = []
    for loss_tag, sources in arms:
        config = arm_config(base, loss_tag, sources)
        arm_dir = out_dir / arm_name(loss_tag, sources)
        result = run_training(config, arm_dir)
        final = result.checkpoint_steps[-1]
        report = run_eval(config, checkpoint_path(arm_dir, final), arm_dir)
        metrics = dict(report.metrics)
        metrics["svo_avg"] = float(np.mean([
            metrics[t] for t in ("svo_subject", "svo_verb", "svo_object")]))
        flags = LOSS_ARMS[loss_tag]
        rows.append({
            "arm": arm_name(loss_tag, sources),
            "loss": loss_tag,
            "sources": sources,
            "flags": flags,
            "metrics": metrics,
        })
    summary = out_dir / "summary.tsv"
    _write_summary(summary, rows, base.config_hash())
    return summary


def _write_summary(path: Path, rows: list[dict], config_hash: str) -> None:
    source_cols = ("captions", "object_labels", "attribute_labels", "region_descriptions")
    loss_cols = ("A", "VMA", "bbox", "pevl")
    header = ["arm", *source_cols, *(f"loss_{c}" for c in loss_cols), *SUMMARY_METRICS]
    lines = [f"# config_hash={config_hash}", "\t".join(header)]
    for row in rows:
        flags = row["flags"]
        loss_marks = [
            "x",
            "x" if flags["use_vma"] else "-",
            "x" if flags["use_bbox"] else "-",
            "x" if flags["use_pevl_tokens"] else "-",
        ]
        fields = [row["arm"]]
        fields += ["x" if s in row["sources"] else "-" for s in source_cols]
        fields += loss_marks
        fields += [f"{row['metrics'][m]:.4f}" for m in SUMMARY_METRICS]
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
