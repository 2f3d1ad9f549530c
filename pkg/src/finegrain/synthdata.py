"""Procedural grounded scenes: patch grids, captions, detections, foils.

A scene is a G x G grid of patch feature vectors (one-hot shape channels
followed by one-hot color channels).  Objects occupy disjoint rectangular
cell blocks; each object's bounding box is the block extent shrunk by a
small jitter and rounded to four decimals, so dataset files serialize
boxes losslessly.  Everything is a pure function of (seed, index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FoilCapabilityError, ValidationError
from .seeding import rng_for

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}
NUMERALS = ("one", "two", "three", "four")

GRID_CHANNELS = len(SHAPES) + len(COLORS)

CAPTION_KIND = "caption"
DETECTION_KINDS = ("object_label", "attribute_label", "region_description")

FOIL_SUBTASKS = (
    "existence", "counting", "relation_swap", "object_swap", "attribute_swap",
    "svo_subject", "svo_verb", "svo_object",
)

MAX_OBJECTS = 4
_BBOX_DECIMALS = 4


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValidationError(f"invalid bbox corners {self.corners()}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


FULL_IMAGE_BBOX = BBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    bbox: BBox
    index: int

    def noun_phrase(self, article: str = "a") -> str:
        return f"{article} {self.color} {self.shape}"


@dataclass(frozen=True)
class Scene:
    ident: str
    grid_size: int
    objects: tuple[SceneObject, ...]
    grid: np.ndarray  # (G, G, GRID_CHANNELS)

    def __eq__(self, other):
        return isinstance(other, Scene) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash(self.ident)


@dataclass(frozen=True)
class CaptionSample:
    scene: Scene
    text: str


@dataclass(frozen=True)
class DetectionSample:
    scene: Scene
    kind: str
    text: str
    bbox: BBox
    entity_span_end: int  # token count of the leading entity phrase


@dataclass(frozen=True)
class FoilPair:
    subtask: str
    pos_scene: Scene
    pos_text: str
    neg_scene: Scene | None
    neg_text: str | None


# -- scene construction -------------------------------------------------------


def render_grid(grid_size: int, objects: Sequence[SceneObject]) -> np.ndarray:
    grid = np.zeros((grid_size, grid_size, GRID_CHANNELS), dtype=np.float64)
    for obj in objects:
        for row, col in patches_touching(obj.bbox, grid_size):
            grid[row, col, SHAPES.index(obj.shape)] = 1.0
            grid[row, col, len(SHAPES) + COLORS.index(obj.color)] = 1.0
    return grid


def patches_touching(bbox: BBox, grid_size: int) -> list[tuple[int, int]]:
    """Cells whose rectangle intersects the bbox with positive area."""
    cell = 1.0 / grid_size
    out = []
    for row in range(grid_size):
        for col in range(grid_size):
            x_overlap = min(bbox.x2, (col + 1) * cell) - max(bbox.x1, col * cell)
            y_overlap = min(bbox.y2, (row + 1) * cell) - max(bbox.y1, row * cell)
            if x_overlap > 0.0 and y_overlap > 0.0:
                out.append((row, col))
    return out


def _jittered_bbox(rng: np.random.Generator, col: int, row: int, w: int, h: int, grid_size: int) -> BBox:
    cell = 1.0 / grid_size
    # shrink each side by up to 20% of the block extent; the box still
    # intersects every cell of its block with positive area
    insets = rng.uniform(0.0, 0.2, size=4)
    x1 = col * cell + insets[0] * w * cell
    x2 = (col + w) * cell - insets[1] * w * cell
    y1 = row * cell + insets[2] * h * cell
    y2 = (row + h) * cell - insets[3] * h * cell
    return BBox(
        round(x1, _BBOX_DECIMALS), round(y1, _BBOX_DECIMALS),
        round(min(x2, 1.0), _BBOX_DECIMALS), round(min(y2, 1.0), _BBOX_DECIMALS),
    )


def generate_scene(seed: int, index: int = 0, grid_size: int = 4) -> Scene:
    rng = rng_for(seed, "scene", index)
    max_count = min(MAX_OBJECTS, grid_size * grid_size)
    count = int(rng.integers(1, max_count + 1))
    combo_ids = rng.choice(len(COLORS) * len(SHAPES), size=count, replace=False)
    occupied = np.zeros((grid_size, grid_size), dtype=bool)
    objects = []
    for obj_index, combo in enumerate(combo_ids):
        color = COLORS[int(combo) // len(SHAPES)]
        shape = SHAPES[int(combo) % len(SHAPES)]
        remaining = count - obj_index - 1
        free_cells = grid_size * grid_size - int(occupied.sum())
        allow_big = grid_size >= 3 and free_cells - 4 >= remaining
        placement = None
        for _ in range(16):
            w = h = 2 if (allow_big and rng.integers(0, 2) == 1) else 1
            col = int(rng.integers(0, grid_size - w + 1))
            row = int(rng.integers(0, grid_size - h + 1))
            if not occupied[row:row + h, col:col + w].any():
                placement = (row, col, w, h)
                break
        if placement is None:
            # rejection sampling missed; pick any free cell for a 1x1 block
            free = np.argwhere(~occupied)
            pick = free[int(rng.integers(0, len(free)))]
            placement = (int(pick[0]), int(pick[1]), 1, 1)
        row, col, w, h = placement
        occupied[row:row + h, col:col + w] = True
        bbox = _jittered_bbox(rng, col, row, w, h, grid_size)
        objects.append(SceneObject(shape, color, bbox, obj_index))
    objects = tuple(objects)
    return Scene(f"scene:{seed}:{index}", grid_size, objects, render_grid(grid_size, objects))


def _with_objects(scene: Scene, objects: Sequence[SceneObject], tag: str) -> Scene:
    objects = tuple(objects)
    return Scene(
        f"{scene.ident}/{tag}", scene.grid_size, objects,
        render_grid(scene.grid_size, objects),
    )


# -- text templates ------------------------------------------------------------


def relation_between(a: SceneObject, b: SceneObject) -> str:
    """Relation of a with respect to b; y grows downward as in image coords."""
    (ax, ay), (bx, by) = a.bbox.center(), b.bbox.center()
    if abs(ax - bx) >= abs(ay - by):
        return "left of" if ax < bx else "right of"
    return "above" if ay < by else "below"


def caption_of(scene: Scene) -> CaptionSample:
    objs = scene.objects
    if len(objs) == 1:
        return CaptionSample(scene, objs[0].noun_phrase())
    rel = relation_between(objs[0], objs[1])
    text = f"{objs[0].noun_phrase()} is {rel} {objs[1].noun_phrase()}"
    for extra in objs[2:]:
        text += f" and {extra.noun_phrase()}"
    return CaptionSample(scene, text)


def relation_statement(a: SceneObject, b: SceneObject, rel: str | None = None) -> str:
    rel = rel or relation_between(a, b)
    return f"{a.noun_phrase('the')} is {rel} {b.noun_phrase('the')}"


def detections_of(scene: Scene) -> list[DetectionSample]:
    out = []
    for obj in scene.objects:
        out.append(DetectionSample(scene, "object_label", obj.shape, obj.bbox, 1))
        out.append(DetectionSample(scene, "attribute_label", f"{obj.color} {obj.shape}", obj.bbox, 2))
    for a, b in zip(scene.objects, scene.objects[1:]):
        rel = relation_between(a, b)
        text = f"{a.noun_phrase('the')} {rel} {b.noun_phrase('the')}"
        out.append(DetectionSample(scene, "region_description", text, a.bbox, 3))
    return out


# -- foils ---------------------------------------------------------------------


def _first_pair(scene: Scene, distinct: str | None = None) -> tuple[SceneObject, SceneObject]:
    objs = scene.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if distinct is None or getattr(objs[i], distinct) != getattr(objs[j], distinct):
                return objs[i], objs[j]
    raise FoilCapabilityError(f"scene has no object pair with distinct {distinct}")


def _swap_positions(scene: Scene, a: SceneObject, b: SceneObject, tag: str) -> Scene:
    swapped = []
    for obj in scene.objects:
        if obj.index == a.index:
            swapped.append(replace(obj, bbox=b.bbox))
        elif obj.index == b.index:
            swapped.append(replace(obj, bbox=a.bbox))
        else:
            swapped.append(obj)
    return _with_objects(scene, swapped, tag)


def _replace_identity(scene: Scene, target: SceneObject, tag: str) -> Scene:
    used = {(o.color, o.shape) for o in scene.objects}
    for color in COLORS:
        for shape in SHAPES:
            if (color, shape) not in used:
                new = replace(target, color=color, shape=shape)
                objects = [new if o.index == target.index else o for o in scene.objects]
                return _with_objects(scene, objects, tag)
    raise FoilCapabilityError("no unused color/shape combination left")


def make_foils(scene: Scene, subtask: str) -> FoilPair:
    if subtask == "existence":
        obj = scene.objects[0]
        return FoilPair(
            subtask, scene,
            f"there is {obj.noun_phrase()}", None,
            f"there is no {obj.color} {obj.shape}",
        )

    if subtask == "counting":
        counts = {s: sum(o.shape == s for o in scene.objects) for s in SHAPES}
        shape = next((s for s in SHAPES if counts[s] >= 2), None)
        if shape is None:
            raise FoilCapabilityError("counting foil needs a shape with at least two instances")
        n = counts[shape]
        foil_n = n + 1 if n < MAX_OBJECTS else n - 1
        return FoilPair(
            subtask, scene,
            f"there are exactly {NUMERALS[n - 1]} {PLURAL[shape]}", None,
            f"there are exactly {NUMERALS[foil_n - 1]} {PLURAL[shape]}",
        )

    if len(scene.objects) < 2:
        raise FoilCapabilityError(f"{subtask} foil needs at least two objects")

    if subtask == "relation_swap":
        a, b = scene.objects[0], scene.objects[1]
        rel = relation_between(a, b)
        return FoilPair(
            subtask, scene, relation_statement(a, b, rel),
            _swap_positions(scene, a, b, "swapped"),
            relation_statement(b, a, rel),
        )

    if subtask == "object_swap":
        a, b = _first_pair(scene, "shape")
        pos = relation_statement(a, b)
        neg = relation_statement(replace(a, shape=b.shape), replace(b, shape=a.shape),
                                 relation_between(a, b))
        return FoilPair(subtask, scene, pos, None, neg)

    if subtask == "attribute_swap":
        a, b = _first_pair(scene, "color")
        pos = relation_statement(a, b)
        neg = relation_statement(replace(a, color=b.color), replace(b, color=a.color),
                                 relation_between(a, b))
        return FoilPair(subtask, scene, pos, None, neg)

    if subtask in ("svo_subject", "svo_verb", "svo_object"):
        a, b = scene.objects[0], scene.objects[1]
        text = relation_statement(a, b)
        if subtask == "svo_subject":
            neg_scene = _replace_identity(scene, a, "subj")
        elif subtask == "svo_object":
            neg_scene = _replace_identity(scene, b, "obj")
        else:
            neg_scene = _swap_positions(scene, a, b, "verb")
        return FoilPair(subtask, scene, text, neg_scene, None)

    raise FoilCapabilityError(f"unknown foil subtask {subtask!r}")


def supports_subtask(scene: Scene, subtask: str) -> bool:
    try:
        make_foils(scene, subtask)
        return True
    except FoilCapabilityError:
        return False


def foil_aspects(pair: FoilPair) -> list[str]:
    """Structured diff of a foil pair, listing the controlled aspects changed.

    A coordinated caption reorder plus the matching layout swap (the
    relation-swap quad construction) counts as the single aspect
    'relation_order'.
    """
    aspects = set()
    if pair.neg_text is not None and pair.neg_text != pair.pos_text:
        pos_toks, neg_toks = pair.pos_text.split(), pair.neg_text.split()
        if sorted(pos_toks) == sorted(neg_toks):
            aspects.add("word_order")
        elif len(pos_toks) == len(neg_toks):
            subs = {(p, n) for p, n in zip(pos_toks, neg_toks) if p != n}
            if all(p in NUMERALS and n in NUMERALS for p, n in subs):
                aspects.add("numeral")
            elif all(p in COLORS and n in COLORS for p, n in subs):
                aspects.add("colors")
            elif all(p in SHAPES and n in SHAPES for p, n in subs):
                aspects.add("shapes")
            else:
                aspects.add("wording")
        else:
            added = set(neg_toks) - set(pos_toks)
            aspects.add("existence" if added == {"no"} else "wording")
    if pair.neg_scene is not None and pair.neg_scene != pair.pos_scene:
        pos_objs, neg_objs = pair.pos_scene.objects, pair.neg_scene.objects
        identity_changes = [
            (p, n) for p, n in zip(pos_objs, neg_objs)
            if (p.color, p.shape) != (n.color, n.shape)
        ]
        bbox_changes = [(p, n) for p, n in zip(pos_objs, neg_objs) if p.bbox != n.bbox]
        if identity_changes and not bbox_changes:
            aspects.add("entity_identity")
        elif bbox_changes and not identity_changes:
            aspects.add("layout")
        else:
            aspects.add("scene")
    if aspects == {"word_order", "layout"}:
        return ["relation_order"]
    return sorted(aspects)


# -- streams and the interleaved sampler ---------------------------------------


@dataclass(frozen=True)
class Batch:
    kind: str  # "caption" | "detection"
    samples: tuple


def caption_stream(seed: int, count: int, grid_size: int = 4) -> list[CaptionSample]:
    return [caption_of(generate_scene(seed, i, grid_size)) for i in range(count)]


def detection_stream(
    seed: int, scene_count: int, kinds: Sequence[str], grid_size: int = 4
) -> list[DetectionSample]:
    wanted = set(kinds)
    unknown = wanted - set(DETECTION_KINDS)
    if unknown:
        raise ValidationError(f"unknown detection kinds {sorted(unknown)}")
    per_scene = []
    for i in range(scene_count):
        scene = generate_scene(seed, i, grid_size)
        per_scene.append([s for s in detections_of(scene) if s.kind in wanted])
    # round-robin across scenes so consecutive batch windows mix images
    out = []
    for column in range(max((len(group) for group in per_scene), default=0)):
        out.extend(group[column] for group in per_scene if column < len(group))
    return out


def schedule_kinds(steps: int, detection_active: bool, ratio: tuple[int, int] = (2, 1)) -> list[str]:
    if not detection_active:
        return ["C"] * steps
    period = ["C"] * ratio[0] + ["D"] * ratio[1]
    return [period[i % len(period)] for i in range(steps)]


def interleaved_sampler(
    captions: Sequence[CaptionSample],
    detections: Sequence[DetectionSample],
    steps: int,
    caption_batch: int,
    detection_batch: int,
    ratio: tuple[int, int] = (2, 1),
    detection_active: bool | None = None,
) -> list[Batch]:
    """Deterministic C,C,D batch schedule with cyclic batch assembly."""
    if detection_active is None:
        detection_active = len(detections) > 0
    if detection_active and not detections:
        raise ValidationError("detection batches requested but the detection stream is empty")
    if not captions and steps > 0:
        raise ValidationError("caption stream is empty")
    kinds = schedule_kinds(steps, detection_active, ratio)
    batches = []
    cursor = {"C": 0, "D": 0}
    for kind in kinds:
        if kind == "C":
            take, pool = caption_batch, captions
        else:
            take, pool = detection_batch, detections
        start = cursor[kind]
        samples = tuple(pool[(start + j) % len(pool)] for j in range(take))
        cursor[kind] = start + take
        batches.append(Batch("caption" if kind == "C" else "detection", samples))
    return batches


def sampler_for_sources(
    seed: int,
    sources: Sequence[str],
    steps: int,
    caption_count: int,
    detection_scene_count: int,
    caption_batch: int,
    detection_batch: int,
    grid_size: int = 4,
) -> list[Batch]:
    """Build streams for the active data sources and schedule the batches."""
    sources = set(sources)
    known = {"captions", "object_labels", "attribute_labels", "region_descriptions"}
    if not sources:
        raise ValidationError("no data source active")
    if sources - known:
        raise ValidationError(f"unknown data sources {sorted(sources - known)}")
    kinds = [k for k in DETECTION_KINDS if f"{k}s" in sources]
    captions = caption_stream(seed, caption_count, grid_size) if "captions" in sources else []
    detections = (
        detection_stream(seed, detection_scene_count, kinds, grid_size) if kinds else []
    )
    if kinds and not detections:
        raise ValidationError("detection sources active but the detection stream is empty")
    if not captions:
        # detection-only run: schedule is pure D
        if not detections:
            raise ValidationError("no samples for the active sources")
        batches = []
        for step in range(steps):
            start = step * detection_batch
            samples = tuple(
                detections[(start + j) % len(detections)] for j in range(detection_batch)
            )
            batches.append(Batch("detection", samples))
        return batches
    return interleaved_sampler(
        captions, detections, steps, caption_batch, detection_batch
    )


# -- dataset files --------------------------------------------------------------


def _grid_hex(grid: np.ndarray) -> str:
    return " ".join(v.hex() for v in grid.reshape(-1))


def _grid_from_hex(payload: str, grid_size: int) -> np.ndarray:
    values = np.array([float.fromhex(tok) for tok in payload.split()], dtype=np.float64)
    return values.reshape(grid_size, grid_size, GRID_CHANNELS)


def _format_bbox(bbox: BBox | None) -> str:
    if bbox is None:
        return "-"
    return " ".join(f"{v:.4f}" for v in bbox.corners())


def write_dataset(path: Path, samples: Iterable[CaptionSample | DetectionSample],
                  seed: int, header: str | None = None) -> None:
    """One sample per line: kind, seed, index, grid payload, text, bbox."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for index, sample in enumerate(samples):
            kind = CAPTION_KIND if isinstance(sample, CaptionSample) else sample.kind
            bbox = None if isinstance(sample, CaptionSample) else sample.bbox
            fh.write("\t".join([
                kind, str(seed), str(index),
                _grid_hex(sample.scene.grid), sample.text, _format_bbox(bbox),
            ]) + "\n")


@dataclass(frozen=True)
class DatasetRecord:
    kind: str
    seed: int
    index: int
    grid: np.ndarray
    text: str
    bbox: BBox | None


def read_dataset(path: Path, grid_size: int = 4) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            kind, seed, index, payload, text, bbox_field = line.rstrip("\n").split("\t")
            bbox = None
            if bbox_field != "-":
                bbox = BBox(*(float(v) for v in bbox_field.split()))
            records.append(DatasetRecord(
                kind, int(seed), int(index), _grid_from_hex(payload, grid_size), text, bbox,
            ))
    return records
