"""Dual-stream encoder with cross-modal fusion at desk scale.

Vision and text streams are small pre-norm transformers; the fusion
stream adds cross-attention from text queries to vision states.  The
vision [CLS] token stays visible under every patch-visibility mask, and
masked rows are zeroed on output so downstream code can never read them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops, tensor
from .errors import (
    DegenerateMaskError,
    DependencyError,
    SequenceLengthError,
    ValidationError,
    VocabError,
)
from .seeding import rng_for
from .synthdata import BBox, GRID_CHANNELS
from .tensor import Tensor
from .vocab import POS_CLOSE, POS_OPEN, Vocabulary

CHECKPOINT_MAGIC = "finegrain-checkpoint"
CHECKPOINT_VERSION = "v1"


@dataclass(frozen=True)
class ModelConfig:
    patch_grid: int = 4
    patch_channels: int = GRID_CHANNELS
    hidden_dim: int = 64
    vision_layers: int = 2
    text_layers: int = 2
    cross_layers: int = 2
    heads: int = 4
    proj_dim: int = 32
    mlp_dim: int | None = None
    max_len: int = 32
    use_pevl_tokens: bool = False
    pevl_bins: int = 32
    image_extent: int = 256
    temperature_init: float = 0.07
    vocab: Vocabulary = field(default=None, compare=False)

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.temperature_init <= 0:
            raise ValidationError("temperature must be positive")
        if self.mlp_dim is None:
            object.__setattr__(self, "mlp_dim", 2 * self.hidden_dim)
        if self.vocab is None:
            bins = self.pevl_bins if self.use_pevl_tokens else None
            object.__setattr__(self, "vocab", Vocabulary(bins))

    @property
    def num_patches(self) -> int:
        return self.patch_grid * self.patch_grid


@dataclass
class EncodedPair:
    image_feat: Tensor  # (1, proj_dim), unit norm
    text_feat: Tensor  # (1, proj_dim), unit norm
    cross_cls: Tensor  # (1, hidden_dim)
    vision_states: Tensor
    text_states: Tensor
    cross_states: Tensor


def _attention_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) table.

    Init kinds: linear (std 1/sqrt(fan_in)), head (100x smaller), table
    (std 1/sqrt(d); rows are vectors in the residual stream), zeros, ones,
    tau.  Width-aware scales matter at desk scale: flat small-std init
    leaves [CLS] states nearly input-independent and stalls the
    contrastive/matching losses.
    """
    d, m, v = cfg.hidden_dim, cfg.mlp_dim, len(cfg.vocab)
    rows: list[tuple[str, tuple[int, ...], str]] = [
        ("text.emb", (v, d), "table"),
        ("text.pos", (cfg.max_len, d), "table"),
        ("vision.patch_w", (cfg.patch_channels, d), "linear"),
        ("vision.patch_b", (d,), "zeros"),
        ("vision.pos", (cfg.num_patches + 1, d), "table"),
        ("vision.cls", (1, d), "table"),
    ]

    def attn(prefix):
        return [
            (f"{prefix}.wq", (d, d), "linear"), (f"{prefix}.bq", (d,), "zeros"),
            (f"{prefix}.wk", (d, d), "linear"), (f"{prefix}.bk", (d,), "zeros"),
            (f"{prefix}.wv", (d, d), "linear"), (f"{prefix}.bv", (d,), "zeros"),
            (f"{prefix}.wo", (d, d), "linear"), (f"{prefix}.bo", (d,), "zeros"),
        ]

    def block(prefix, with_cross):
        out = [
            (f"{prefix}.ln1_g", (d,), "ones"), (f"{prefix}.ln1_b", (d,), "zeros"),
            *attn(f"{prefix}.attn"),
        ]
        if with_cross:
            out += [
                (f"{prefix}.lnx_g", (d,), "ones"), (f"{prefix}.lnx_b", (d,), "zeros"),
                *attn(f"{prefix}.xattn"),
            ]
        out += [
            (f"{prefix}.ln2_g", (d,), "ones"), (f"{prefix}.ln2_b", (d,), "zeros"),
            (f"{prefix}.mlp_w1", (d, m), "linear"), (f"{prefix}.mlp_b1", (m,), "zeros"),
            (f"{prefix}.mlp_w2", (m, d), "linear"), (f"{prefix}.mlp_b2", (d,), "zeros"),
        ]
        return out

    for i in range(cfg.vision_layers):
        rows += block(f"vision.{i}", with_cross=False)
    for i in range(cfg.text_layers):
        rows += block(f"text.{i}", with_cross=False)
    for i in range(cfg.cross_layers):
        rows += block(f"cross.{i}", with_cross=True)
    rows += [
        ("proj.img_w", (d, cfg.proj_dim), "linear"), ("proj.img_b", (cfg.proj_dim,), "zeros"),
        ("proj.txt_w", (d, cfg.proj_dim), "linear"), ("proj.txt_b", (cfg.proj_dim,), "zeros"),
        ("head.itm_w", (d, 2), "head"), ("head.itm_b", (2,), "zeros"),
        ("head.bbox_w", (d, 4), "head"), ("head.bbox_b", (4,), "zeros"),
        ("head.mlm_b", (v,), "zeros"),
        ("log_tau", (), "tau"),
    ]
    return rows


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape, dtype=np.int64)) if shape else 1
               for _, shape, _ in param_shapes(cfg))


class VLModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = rng_for(seed, "model-init")
        self.params: dict[str, Tensor] = {}
        for name, shape, kind in param_shapes(config):
            if kind == "linear":
                values = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            elif kind == "head":
                # classifier heads start near zero: untrained matching scores
                # sit at chance and the box head at the centered half box
                values = rng.normal(0.0, 0.01 / np.sqrt(shape[0]), size=shape)
            elif kind == "table":
                values = rng.normal(0.0, 1.0 / np.sqrt(config.hidden_dim), size=shape)
            elif kind == "ones":
                values = np.ones(shape)
            elif kind == "tau":
                values = np.array(np.log(config.temperature_init))
            else:
                values = np.zeros(shape)
            self.params[name] = Tensor(values, requires_grad=True)

    # -- plumbing -------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name, _, _ in param_shapes(self.config)]

    def param_count(self) -> int:
        return param_count(self.config)

    def temperature(self) -> Tensor:
        return tensor.exp(self.params["log_tau"])

    def _mha(self, prefix: str, x_q: Tensor, x_kv: Tensor, key_mask) -> Tensor:
        p = self.params
        d, heads = self.config.hidden_dim, self.config.heads
        dh = d // heads
        q = tensor.add(tensor.matmul(x_q, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = tensor.add(tensor.matmul(x_kv, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = tensor.add(tensor.matmul(x_kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        outs = [
            ops.masked_attention(
                tensor.slice_cols(q, h * dh, (h + 1) * dh),
                tensor.slice_cols(k, h * dh, (h + 1) * dh),
                tensor.slice_cols(v, h * dh, (h + 1) * dh),
                key_mask,
            )
            for h in range(heads)
        ]
        return tensor.add(tensor.matmul(tensor.concat_cols(outs), p[f"{prefix}.wo"]),
                          p[f"{prefix}.bo"])

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = ops.gelu(tensor.add(tensor.matmul(x, p[f"{prefix}.mlp_w1"]),
                                     p[f"{prefix}.mlp_b1"]))
        return tensor.add(tensor.matmul(hidden, p[f"{prefix}.mlp_w2"]), p[f"{prefix}.mlp_b2"])

    def _block(self, prefix: str, x: Tensor, key_mask,
               cross_kv: Tensor | None = None, cross_mask=None) -> Tensor:
        p = self.params
        normed = ops.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
        x = tensor.add(x, self._mha(f"{prefix}.attn", normed, normed, key_mask))
        if cross_kv is not None:
            normed = ops.layer_norm(x, p[f"{prefix}.lnx_g"], p[f"{prefix}.lnx_b"])
            x = tensor.add(x, self._mha(f"{prefix}.xattn", normed, cross_kv, cross_mask))
        normed = ops.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
        return tensor.add(x, self._mlp(prefix, normed))

    @staticmethod
    def _zero_masked_rows(states: Tensor, keep: np.ndarray) -> Tensor:
        if keep.all():
            return tensor.mul(states, Tensor(np.ones((keep.size, 1))))
        return tensor.mul(states, Tensor(keep.astype(np.float64)[:, None]))

    # -- encoders ---------------------------------------------------------------

    def _vision_token_mask(self, visibility) -> np.ndarray:
        n = self.config.num_patches
        if visibility is None:
            patches = np.ones(n, dtype=bool)
        else:
            patches = np.asarray(visibility, dtype=bool).reshape(-1)
            if patches.size != n:
                raise ValidationError(
                    f"visibility mask has {patches.size} entries for {n} patches"
                )
            if not patches.any():
                raise DegenerateMaskError("every patch is masked")
        return np.concatenate([[True], patches])  # [CLS] always visible

    def encode_image(self, grid: np.ndarray, visibility=None) -> Tensor:
        cfg = self.config
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != (cfg.patch_grid, cfg.patch_grid, cfg.patch_channels):
            raise ValidationError(
                f"grid shape {grid.shape} does not match config "
                f"({cfg.patch_grid}x{cfg.patch_grid}x{cfg.patch_channels})"
            )
        token_mask = self._vision_token_mask(visibility)
        patches = Tensor(grid.reshape(cfg.num_patches, cfg.patch_channels))
        emb = tensor.add(tensor.matmul(patches, self.params["vision.patch_w"]),
                         self.params["vision.patch_b"])
        x = tensor.add(tensor.concat_rows([self.params["vision.cls"], emb]),
                       self.params["vision.pos"])
        for i in range(cfg.vision_layers):
            x = self._block(f"vision.{i}", x, token_mask)
        return self._zero_masked_rows(x, token_mask)

    def encode_text(self, token_ids) -> Tensor:
        cfg = self.config
        ids = [int(i) for i in token_ids]
        if len(ids) > cfg.max_len:
            raise SequenceLengthError(f"{len(ids)} tokens exceed max_len {cfg.max_len}")
        if any(i < 0 or i >= len(cfg.vocab) for i in ids):
            raise VocabError(f"token id out of range for vocabulary of {len(cfg.vocab)}")
        if not ids or ids[0] != cfg.vocab.cls_id:
            raise ValidationError("text must start with [CLS]")
        pad_mask = np.array([i != cfg.vocab.pad_id for i in ids])
        x = tensor.add(ops.embed(ids, self.params["text.emb"]),
                       tensor.take_rows(self.params["text.pos"], list(range(len(ids)))))
        for i in range(cfg.text_layers):
            x = self._block(f"text.{i}", x, pad_mask)
        return self._zero_masked_rows(x, pad_mask)

    def fuse(self, text_states: Tensor, vision_states: Tensor,
             visibility=None, text_mask=None) -> Tensor:
        cfg = self.config
        vision_mask = self._vision_token_mask(visibility)
        if text_mask is None:
            text_mask = np.ones(text_states.shape[0], dtype=bool)
        x = text_states
        for i in range(cfg.cross_layers):
            x = self._block(f"cross.{i}", x, text_mask,
                            cross_kv=vision_states, cross_mask=vision_mask)
        return self._zero_masked_rows(x, text_mask)

    def encode_pair(self, grid: np.ndarray, token_ids, visibility=None) -> EncodedPair:
        vision_states = self.encode_image(grid, visibility)
        text_states = self.encode_text(token_ids)
        ids = [int(i) for i in token_ids]
        text_mask = np.array([i != self.config.vocab.pad_id for i in ids])
        cross_states = self.fuse(text_states, vision_states, visibility, text_mask)
        image_feat = ops.l2_normalize(tensor.add(
            tensor.matmul(tensor.take_rows(vision_states, [0]), self.params["proj.img_w"]),
            self.params["proj.img_b"]))
        text_feat = ops.l2_normalize(tensor.add(
            tensor.matmul(tensor.take_rows(text_states, [0]), self.params["proj.txt_w"]),
            self.params["proj.txt_b"]))
        cross_cls = tensor.take_rows(cross_states, [0])
        return EncodedPair(image_feat, text_feat, cross_cls,
                           vision_states, text_states, cross_states)

    # -- heads -------------------------------------------------------------------

    def itm_logits(self, cross_cls: Tensor) -> Tensor:
        return tensor.add(tensor.matmul(cross_cls, self.params["head.itm_w"]),
                          self.params["head.itm_b"])

    def matching_probability(self, cross_cls: Tensor) -> float:
        logits = self.itm_logits(cross_cls).array[0]
        shifted = logits - logits.max()
        weights = np.exp(shifted)
        return float(weights[1] / weights.sum())

    def mlm_logits(self, cross_states: Tensor) -> Tensor:
        return tensor.add(
            tensor.matmul(cross_states, tensor.transpose(self.params["text.emb"])),
            self.params["head.mlm_b"])

    def bbox_corners(self, cross_cls: Tensor) -> Tensor:
        """Predicted box as a (1, 4) corner tensor; gradients stay alive."""
        raw = tensor.add(tensor.matmul(cross_cls, self.params["head.bbox_w"]),
                         self.params["head.bbox_b"])
        squashed = tensor.sigmoid(raw)
        cx = tensor.slice_cols(squashed, 0, 1)
        cy = tensor.slice_cols(squashed, 1, 2)
        floor = Tensor(np.full((1, 1), 1e-3))
        half_w = tensor.scale(tensor.maximum(tensor.slice_cols(squashed, 2, 3), floor), 0.5)
        half_h = tensor.scale(tensor.maximum(tensor.slice_cols(squashed, 3, 4), floor), 0.5)
        return tensor.concat_cols([
            tensor.sub(cx, half_w), tensor.sub(cy, half_h),
            tensor.add(cx, half_w), tensor.add(cy, half_h),
        ])

    def predict_bbox(self, cross_cls: Tensor) -> BBox:
        x1, y1, x2, y2 = self.bbox_corners(cross_cls).array[0]
        return BBox(max(0.0, x1), max(0.0, y1), min(1.0, x2), min(1.0, y2))

    # -- position tokens -----------------------------------------------------------

    def encode_position_tokens(self, caption_tokens: list[str], bbox: BBox,
                               insert_after: int | None = None) -> list[str]:
        cfg = self.config
        if not cfg.use_pevl_tokens:
            raise ValidationError("position tokens need a PEVL-enabled vocabulary")
        out = position_token_insert(caption_tokens, bbox, cfg.pevl_bins,
                                    cfg.image_extent, insert_after)
        if len(out) + 2 > cfg.max_len:  # [CLS]/[SEP] framing
            raise SequenceLengthError(
                f"{len(out)} tokens after insertion exceed max_len {cfg.max_len}"
            )
        return out


def quantize_coordinate(value: float, bins: int, image_extent: int) -> int:
    """Scale a normalized coordinate to the image extent, then bin it."""
    pixels = value * image_extent
    index = int(np.floor(pixels * bins / image_extent))
    return min(max(index, 0), bins - 1)


def dequantize_coordinate(index: int, bins: int) -> float:
    return (index + 0.5) / bins


def position_token_insert(tokens: list[str], bbox: BBox, bins: int,
                          image_extent: int, insert_after: int | None = None) -> list[str]:
    """Insert "< b(x1) b(y1) b(x2) b(y2) >" right after the entity span."""
    if bins < 2:
        raise ValidationError("position quantization needs at least 2 bins")
    cut = len(tokens) if insert_after is None else int(insert_after)
    if not 0 <= cut <= len(tokens):
        raise ValidationError(f"insertion point {cut} outside token range")
    bin_tokens = [
        str(quantize_coordinate(v, bins, image_extent)) for v in bbox.corners()
    ]
    return list(tokens[:cut]) + [POS_OPEN, *bin_tokens, POS_CLOSE] + list(tokens[cut:])


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: VLModel, path: Path, config_hash: str) -> None:
    """Line-delimited text: header, then one 'name shape hex...' line per tensor."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {config_hash}\n")
        for name, _, _ in param_shapes(model.config):
            arr = model.params[name].array
            shape = ",".join(str(n) for n in arr.shape) or "scalar"
            payload = " ".join(v.hex() for v in arr.reshape(-1))
            fh.write(f"{name}\t{shape}\t{payload}\n")


def load_checkpoint(model: VLModel, path: Path, expect_hash: str | None = None) -> str:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != CHECKPOINT_MAGIC:
            raise DependencyError(f"not a checkpoint file: {path}")
        if header[1] != CHECKPOINT_VERSION:
            raise DependencyError(f"unsupported checkpoint version {header[1]}")
        found_hash = header[2]
        if expect_hash is not None and found_hash != expect_hash:
            raise DependencyError(
                f"checkpoint belongs to config {found_hash}, expected {expect_hash}"
            )
        seen = set()
        for line in fh:
            name, shape_field, payload = line.rstrip("\n").split("\t")
            if name not in model.params:
                raise DependencyError(f"unexpected parameter {name!r} in checkpoint")
            shape = () if shape_field == "scalar" else tuple(
                int(n) for n in shape_field.split(","))
            values = np.array([float.fromhex(tok) for tok in payload.split()],
                              dtype=np.float64).reshape(shape)
            if values.shape != model.params[name].array.shape:
                raise DependencyError(
                    f"parameter {name!r} has shape {values.shape}, "
                    f"expected {model.params[name].array.shape}"
                )
            model.params[name].array = np.ascontiguousarray(values)
            seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise DependencyError(f"checkpoint is missing parameters: {sorted(missing)[:3]}...")
    return found_hash
