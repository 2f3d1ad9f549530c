"""Run configuration: plain key=value sections, lossless round-trip, hashing.

The seed is mandatory (nothing falls back to wall-clock time) and the
canonical rendering of a config is hashed into every artifact the run
writes, so resuming against the wrong config is a hard error.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError
from .model import ModelConfig
from .objectives import DATA_SOURCES, AblationConfig
from .synthdata import GRID_CHANNELS

_SCHEMA: dict[str, list[tuple[str, type]]] = {
    "run": [("seed", int), ("steps", int), ("cadence", int)],
    "model": [
        ("patch_grid", int), ("hidden_dim", int), ("vision_layers", int),
        ("text_layers", int), ("cross_layers", int), ("heads", int),
        ("proj_dim", int), ("mlp_dim", int), ("max_len", int),
        ("pevl_bins", int), ("image_extent", int), ("temperature_init", float),
    ],
    "ablation": [
        ("use_vma", bool), ("use_bbox", bool), ("use_pevl_tokens", bool),
        ("sources", str),
    ],
    "data": [
        ("data_seed", int), ("caption_count", int), ("detection_scene_count", int),
        ("caption_batch", int), ("detection_batch", int),
        ("eval_seed", int), ("eval_per_subtask", int), ("retrieval_count", int),
    ],
    "train": [("learning_rate", float), ("clip_norm", float)],
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    steps: int = 900
    cadence: int = 300
    patch_grid: int = 4
    hidden_dim: int = 64
    vision_layers: int = 2
    text_layers: int = 2
    cross_layers: int = 2
    heads: int = 4
    proj_dim: int = 32
    mlp_dim: int = 128
    max_len: int = 32
    pevl_bins: int = 32
    image_extent: int = 256
    temperature_init: float = 0.07
    use_vma: bool = True
    use_bbox: bool = True
    use_pevl_tokens: bool = False
    sources: str = "captions,object_labels,attribute_labels,region_descriptions"
    data_seed: int = 1
    caption_count: int = 64
    detection_scene_count: int = 48
    caption_batch: int = 4
    detection_batch: int = 4
    eval_seed: int = 9000
    eval_per_subtask: int = 20
    retrieval_count: int = 8
    learning_rate: float = 1e-2
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.steps <= 0 or self.cadence <= 0:
            raise ValidationError("run.steps and run.cadence must be positive")
        if self.steps % self.cadence != 0:
            raise ValidationError(
                f"run.cadence {self.cadence} must divide run.steps {self.steps}")
        self.source_set()  # validates source names
        self.ablation_config()  # validates loss/source compatibility

    def source_set(self) -> frozenset:
        parts = frozenset(p.strip() for p in self.sources.split(",") if p.strip())
        unknown = parts - set(DATA_SOURCES)
        if unknown:
            raise ValidationError(f"ablation.sources has unknown entries {sorted(unknown)}")
        if not parts:
            raise ValidationError("ablation.sources must list at least one source")
        return parts

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            patch_grid=self.patch_grid,
            patch_channels=GRID_CHANNELS,
            hidden_dim=self.hidden_dim,
            vision_layers=self.vision_layers,
            text_layers=self.text_layers,
            cross_layers=self.cross_layers,
            heads=self.heads,
            proj_dim=self.proj_dim,
            mlp_dim=self.mlp_dim,
            max_len=self.max_len,
            use_pevl_tokens=self.use_pevl_tokens,
            pevl_bins=self.pevl_bins,
            image_extent=self.image_extent,
            temperature_init=self.temperature_init,
        )

    def ablation_config(self) -> AblationConfig:
        return AblationConfig(
            use_vma=self.use_vma,
            use_bbox=self.use_bbox,
            use_pevl_tokens=self.use_pevl_tokens,
            sources=self.source_set(),
        )

    def render(self) -> str:
        """Canonical key=value text; parsing it back is lossless."""
        lines = []
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key, kind in keys:
                value = values[key]
                if kind is bool:
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:12]


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse {origin}: {exc}") from exc
    kwargs = {}
    for section, keys in _SCHEMA.items():
        if not parser.has_section(section):
            raise ValidationError(f"{origin}: missing section [{section}]")
        known = {k for k, _ in keys}
        extra = set(parser.options(section)) - known
        if extra:
            raise ValidationError(
                f"{origin}: unknown option(s) {sorted(extra)} in section [{section}]")
        for key, kind in keys:
            if not parser.has_option(section, key):
                raise ValidationError(f"{origin}: missing option {section}.{key}")
            raw = parser.get(section, key)
            try:
                if kind is bool:
                    kwargs[key] = parser.getboolean(section, key)
                else:
                    kwargs[key] = kind(raw)
            except ValueError as exc:
                raise ValidationError(
                    f"{origin}: option {section}.{key}={raw!r} is not a valid {kind.__name__}"
                ) from exc
    return RunConfig(**kwargs)


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), origin=str(path))


def save_config(config: RunConfig, path: Path) -> None:
    Path(path).write_text(config.render(), encoding="utf-8")


def default_config_text(seed: int = 7) -> str:
    return RunConfig(seed=seed).render()
