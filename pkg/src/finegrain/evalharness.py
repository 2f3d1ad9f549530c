"""Zero-shot scoring protocols over matching scores.

Every protocol uses strict inequalities: a tie is scored as incorrect.
Accuracies based purely on comparisons are therefore invariant under any
strictly increasing transform of the scores; the 50%-threshold protocol
is the one exception since it anchors to the 0.5 level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInputError, ValidationError
from .model import VLModel
from .synthdata import FoilPair, Scene, generate_scene, make_foils, supports_subtask

FOIL_GROUP_SUBTASKS = ("existence", "counting", "object_swap", "attribute_swap")
PAIRWISE_SUBTASKS = ("svo_subject", "svo_verb", "svo_object")
THRESHOLD_SUBTASK = "relation_statement"
QUAD_SUBTASK = "relation_swap"

KNOWN_SUBTASKS = FOIL_GROUP_SUBTASKS + PAIRWISE_SUBTASKS + (THRESHOLD_SUBTASK, QUAD_SUBTASK)

Scorer = Callable[[Scene, str], float]


@dataclass(frozen=True)
class ScoreMatrix:
    """Winoground-style quad: scores[i][j] = score of caption i with image j."""

    scores: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        flat = [v for row in self.scores for v in row]
        if len(flat) != 4 or not all(np.isfinite(v) for v in flat):
            raise ValidationError(f"score matrix needs four finite entries, got {self.scores}")

    def __getitem__(self, i):
        return self.scores[i]


@dataclass
class EvalReport:
    checkpoint_step: int
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, int]]:
        return [(name, self.metrics[name], self.counts.get(name, 0))
                for name in sorted(self.metrics)]


def model_scorer(model: VLModel) -> Scorer:
    def score(scene: Scene, text: str) -> float:
        ids = model.config.vocab.encode_wrapped(text)
        pair = model.encode_pair(scene.grid, ids)
        return model.matching_probability(pair.cross_cls)

    return score


def as_scorer(model_or_scorer) -> Scorer:
    if isinstance(model_or_scorer, VLModel):
        return model_scorer(model_or_scorer)
    return model_or_scorer


# -- protocols -------------------------------------------------------------------


def pairwise_ranking_accuracy(pairs: Sequence[tuple[float, float]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("pairwise ranking needs at least one pair")
    return sum(1 for pos, neg in pairs if pos > neg) / len(pairs)


def threshold_accuracy(scored: Sequence[tuple[float, bool]]) -> float:
    scored = list(scored)
    if not scored:
        raise EmptyInputError("threshold accuracy needs at least one item")
    correct = sum(
        1 for score, label in scored if (score > 0.5 if label else score < 0.5)
    )
    return correct / len(scored)


def foil_accuracy(groups: Sequence[tuple[float, Sequence[float]]]) -> float:
    groups = list(groups)
    if not groups:
        raise EmptyInputError("foil accuracy needs at least one group")
    correct = sum(
        1 for pos, negs in groups if negs and all(pos > neg for neg in negs)
    )
    return correct / len(groups)


def winoground_scores(quads: Sequence[ScoreMatrix]) -> tuple[float, float, float]:
    quads = list(quads)
    if not quads:
        raise EmptyInputError("winoground scoring needs at least one quad")
    text_hits = image_hits = group_hits = 0
    for s in quads:
        text_ok = s[0][0] > s[1][0] and s[1][1] > s[0][1]
        image_ok = s[0][0] > s[0][1] and s[1][1] > s[1][0]
        text_hits += text_ok
        image_hits += image_ok
        group_hits += text_ok and image_ok
    n = len(quads)
    return text_hits / n, image_hits / n, group_hits / n


def retrieval_recall(table: np.ndarray, k: int) -> tuple[float, float]:
    """R@k for rows (text retrieval) and columns (image retrieval).

    Ties rank the lower index first, so results are deterministic.
    """
    table = np.asarray(table, dtype=np.float64)
    n = table.shape[0]
    if table.shape != (n, n):
        raise ValidationError(f"retrieval table must be square, got {table.shape}")
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, {n}]")

    def recall_rows(m: np.ndarray) -> float:
        hits = 0
        for i in range(n):
            row = m[i]
            better = sum(
                1 for j in range(n)
                if row[j] > row[i] or (row[j] == row[i] and j < i)
            )
            hits += better < k
        return hits / n

    return recall_rows(table), recall_rows(table.T)


# -- benchmark manifest ----------------------------------------------------------


def default_manifest(eval_seed: int, per_subtask: int, grid_size: int = 4,
                     retrieval_count: int = 0) -> dict:
    manifest = {
        "version": 1,
        "grid_size": grid_size,
        "subtasks": [
            {"tag": tag, "seed": eval_seed, "count": per_subtask}
            for tag in KNOWN_SUBTASKS
        ],
    }
    if retrieval_count:
        manifest["retrieval"] = {"seed": eval_seed, "count": retrieval_count}
    return manifest


def write_manifest(path: Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_manifest(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _foil_source(tag: str) -> str:
    return QUAD_SUBTASK if tag == THRESHOLD_SUBTASK else tag


def subtask_items(tag: str, seed: int, count: int, grid_size: int) -> list[FoilPair]:
    """First `count` deterministic scenes that support the subtask."""
    if tag not in KNOWN_SUBTASKS:
        raise ValidationError(f"unknown subtask tag {tag!r}")
    items = []
    index = 0
    source = _foil_source(tag)
    while len(items) < count:
        scene = generate_scene(seed, index, grid_size)
        index += 1
        if supports_subtask(scene, source):
            items.append(make_foils(scene, source))
        if index > 100 * count + 1000:
            raise ValidationError(f"could not collect {count} scenes for {tag}")
    return items


def _score_subtask(tag: str, items: list[FoilPair], score: Scorer,
                   dump: list[str] | None) -> dict[str, float]:
    def record(item_id, role, value, label):
        if dump is not None:
            dump.append(f"{item_id}\t{tag}\t{role}\t{value:.17g}\t{label}")

    if tag in FOIL_GROUP_SUBTASKS:
        groups = []
        for idx, pair in enumerate(items):
            pos = score(pair.pos_scene, pair.pos_text)
            neg = score(pair.pos_scene, pair.neg_text)
            record(idx, "positive", pos, 1)
            record(idx, "negative", neg, 0)
            groups.append((pos, [neg]))
        return {tag: foil_accuracy(groups)}

    if tag in PAIRWISE_SUBTASKS:
        pairs = []
        for idx, pair in enumerate(items):
            pos = score(pair.pos_scene, pair.pos_text)
            neg = score(pair.neg_scene, pair.pos_text)
            record(idx, "positive", pos, 1)
            record(idx, "negative", neg, 0)
            pairs.append((pos, neg))
        return {tag: pairwise_ranking_accuracy(pairs)}

    if tag == THRESHOLD_SUBTASK:
        scored = []
        for idx, pair in enumerate(items):
            true_score = score(pair.pos_scene, pair.pos_text)
            false_score = score(pair.pos_scene, pair.neg_text)
            record(idx, "true", true_score, 1)
            record(idx, "false", false_score, 0)
            scored.append((true_score, True))
            scored.append((false_score, False))
        return {tag: threshold_accuracy(scored)}

    quads = []
    for idx, pair in enumerate(items):
        s00 = score(pair.pos_scene, pair.pos_text)
        s01 = score(pair.neg_scene, pair.pos_text)
        s10 = score(pair.pos_scene, pair.neg_text)
        s11 = score(pair.neg_scene, pair.neg_text)
        for role, value in (("c0_i0", s00), ("c0_i1", s01), ("c1_i0", s10), ("c1_i1", s11)):
            record(idx, role, value, int(role in ("c0_i0", "c1_i1")))
        quads.append(ScoreMatrix(((s00, s01), (s10, s11))))
    text, image, group = winoground_scores(quads)
    return {
        f"{tag}_text": text,
        f"{tag}_image": image,
        f"{tag}_group": group,
    }


def retrieval_table(score: Scorer, seed: int, count: int, grid_size: int) -> np.ndarray:
    """Square table of scene-vs-caption scores with matched pairs on the diagonal."""
    from .synthdata import caption_of

    scenes, texts = [], []
    for i in range(count):
        scene = generate_scene(seed, i, grid_size)
        scenes.append(scene)
        texts.append(caption_of(scene).text)
    table = np.zeros((count, count))
    for i, scene in enumerate(scenes):
        for j, text in enumerate(texts):
            table[i, j] = score(scene, text)
    return table


def run_benchmark(model, manifest: dict, checkpoint_step: int = 0,
                  dump_path: Path | None = None) -> EvalReport:
    """Route each manifest subtask to its protocol and aggregate a report."""
    score = as_scorer(model)
    report = EvalReport(checkpoint_step=checkpoint_step)
    dump: list[str] | None = [] if dump_path is not None else None
    grid_size = int(manifest.get("grid_size", 4))
    for spec_row in manifest["subtasks"]:
        tag, seed, count = spec_row["tag"], int(spec_row["seed"]), int(spec_row["count"])
        items = subtask_items(tag, seed, count, grid_size)
        metrics = _score_subtask(tag, items, score, dump)
        for name, value in metrics.items():
            report.metrics[name] = value
            report.counts[name] = count
    foil_metrics = [report.metrics[t] for t in FOIL_GROUP_SUBTASKS if t in report.metrics]
    if foil_metrics:
        report.metrics["foil_avg"] = float(np.mean(foil_metrics))
        report.counts["foil_avg"] = sum(
            report.counts[t] for t in FOIL_GROUP_SUBTASKS if t in report.counts)
    retrieval = manifest.get("retrieval")
    if retrieval:
        table = retrieval_table(score, int(retrieval["seed"]), int(retrieval["count"]),
                                grid_size)
        tr1, ir1 = retrieval_recall(table, 1)
        report.metrics["retrieval_tr@1"] = tr1
        report.metrics["retrieval_ir@1"] = ir1
        report.counts["retrieval_tr@1"] = report.counts["retrieval_ir@1"] = len(table)
    if dump_path is not None:
        Path(dump_path).write_text("\n".join(dump) + "\n", encoding="utf-8")
    return report


def write_report(path: Path, report: EvalReport, config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}", "metric\tvalue\tcount"]
    lines += [f"{name}\t{value:.17g}\t{count}" for name, value, count in report.rows()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_json(path: Path, report: EvalReport, config_hash: str) -> None:
    payload = {
        "config_hash": config_hash,
        "checkpoint_step": report.checkpoint_step,
        "metrics": report.metrics,
        "counts": report.counts,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
