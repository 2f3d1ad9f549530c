"""Loss suite and the multi-pass training step.

A caption batch contributes contrastive + matching + masked-LM losses on
(full image, caption).  A detection batch contributes the same unmasked
triple on (full image, region text), then per configuration the visually
masked triple (vision and fusion attention restricted to patches touching
the target box) and the box-regression term; one gradient accumulation,
one update.  Matching negatives are the hardest in-batch negatives by
contrastive similarity, one per positive, mined among samples whose
underlying image differs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops, tensor
from .errors import BatchSizeError, NegativeMiningError, ValidationError
from .model import EncodedPair, VLModel, position_token_insert
from .synthdata import (
    Batch,
    BBox,
    CaptionSample,
    DetectionSample,
    patches_touching,
)
from .tensor import Tensor

LOSS_COMPONENTS = ("cl", "itm", "mlm", "vma_cl", "vma_itm", "vma_mlm", "bbox")
DATA_SOURCES = ("captions", "object_labels", "attribute_labels", "region_descriptions")
DETECTION_SOURCES = ("object_labels", "attribute_labels", "region_descriptions")

MLM_MASK_RATE = 0.15


@dataclass(frozen=True)
class AblationConfig:
    use_vma: bool = True
    use_bbox: bool = True
    use_pevl_tokens: bool = False
    sources: frozenset = frozenset(DATA_SOURCES)

    def __post_init__(self):
        sources = frozenset(self.sources)
        object.__setattr__(self, "sources", sources)
        unknown = sources - set(DATA_SOURCES)
        if unknown:
            raise ValidationError(f"unknown data sources {sorted(unknown)}")
        if not sources:
            raise ValidationError("at least one data source must be active")
        if (self.use_vma or self.use_bbox) and not self.detection_active:
            raise ValidationError("vma/bbox losses need a detection data source")
        if self.use_pevl_tokens and (self.use_vma or self.use_bbox):
            raise ValidationError("position-token runs exclude vma/bbox (separate arms)")
        if self.use_pevl_tokens and not self.detection_active:
            raise ValidationError("position tokens need a detection data source")

    @property
    def detection_active(self) -> bool:
        return any(s in self.sources for s in DETECTION_SOURCES)


@dataclass(frozen=True)
class LossBundle:
    cl: float = 0.0
    itm: float = 0.0
    mlm: float = 0.0
    vma_cl: float = 0.0
    vma_itm: float = 0.0
    vma_mlm: float = 0.0
    bbox: float = 0.0
    total: float = 0.0
    active: frozenset = frozenset()

    def component(self, name: str) -> float:
        return getattr(self, name)

    def active_sum(self) -> float:
        return sum(self.component(name) for name in self.active)


@dataclass
class SgdOptimizer:
    """Plain gradient descent with global gradient-norm clipping."""

    params: list
    lr: float = 1e-2
    clip_norm: float = 1.0

    def step(self) -> None:
        grads = [p.grad_array for p in self.params if p.grad_array is not None]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads))) if grads else 0.0
        factor = self.lr
        if self.clip_norm and norm > self.clip_norm:
            factor = self.lr * self.clip_norm / norm
        for p in self.params:
            if p.grad_array is not None:
                p.array = p.array - factor * p.grad_array
        self.zero()

    def zero(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- individual losses --------------------------------------------------------


def contrastive_loss(image_feats: Tensor, text_feats: Tensor, temperature) -> Tensor:
    """Symmetric InfoNCE with matched pairs on the diagonal."""
    n = image_feats.shape[0]
    if n < 2:
        raise BatchSizeError(f"contrastive loss needs at least 2 pairs, got {n}")
    if text_feats.shape[0] != n:
        raise BatchSizeError("image and text feature counts differ")
    sims = tensor.matmul(image_feats, tensor.transpose(text_feats))
    scaled = tensor.div(sims, tensor.as_tensor(temperature))
    diagonal = list(range(n))
    i2t = ops.softmax_cross_entropy(scaled, diagonal)
    t2i = ops.softmax_cross_entropy(tensor.transpose(scaled), diagonal)
    return tensor.scale(tensor.add(i2t, t2i), 0.5)


def _distinct_image_matrix(grids: Sequence[np.ndarray]) -> np.ndarray:
    n = len(grids)
    distinct = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and not np.array_equal(grids[i], grids[j]):
                distinct[i, j] = True
    return distinct


def mine_hard_negatives(sim_values: np.ndarray, grids: Sequence[np.ndarray]) -> list[int]:
    """Hardest text index per image among samples with a different image."""
    distinct = _distinct_image_matrix(grids)
    picks = []
    for i in range(sim_values.shape[0]):
        candidates = np.where(distinct[i])[0]
        if candidates.size == 0:
            raise NegativeMiningError("no in-batch negative: all images identical")
        picks.append(int(candidates[np.argmax(sim_values[i, candidates])]))
    return picks


def itm_loss(model: VLModel, encoded: Sequence[EncodedPair],
             grids: Sequence[np.ndarray], visibility: Sequence | None = None) -> Tensor:
    """Binary matching loss over positives and one mined negative each."""
    n = len(encoded)
    if n < 2:
        raise BatchSizeError(f"matching loss needs at least 2 pairs, got {n}")
    image_feats = np.concatenate([e.image_feat.array for e in encoded])
    text_feats = np.concatenate([e.text_feat.array for e in encoded])
    picks = mine_hard_negatives(image_feats @ text_feats.T, grids)
    rows = [model.itm_logits(e.cross_cls) for e in encoded]
    for i, j in enumerate(picks):
        mask = None if visibility is None else visibility[i]
        negative_cross = model.fuse(encoded[j].text_states, encoded[i].vision_states, mask)
        rows.append(model.itm_logits(tensor.take_rows(negative_cross, [0])))
    logits = tensor.concat_rows(rows)
    return ops.softmax_cross_entropy(logits, [1] * n + [0] * n)


def select_mask_positions(token_ids: Sequence[int], vocab, rng: np.random.Generator,
                          mask_rate: float = MLM_MASK_RATE) -> list[int]:
    maskable = [i for i, t in enumerate(token_ids) if vocab.is_maskable(t)]
    return [i for i in maskable if rng.random() < mask_rate]


def mlm_loss(model: VLModel, token_batches: Sequence[Sequence[int]],
             grids: Sequence[np.ndarray], rng: np.random.Generator,
             mask_rate: float = MLM_MASK_RATE,
             visibility: Sequence | None = None) -> tuple[Tensor, int]:
    """Visually-grounded masked-LM loss; every selected token becomes [MASK].

    Returns (loss, masked position count); when the batch draws zero
    positions the selection is resampled once, then skipped with count 0.
    """
    vocab = model.config.vocab
    selections = [select_mask_positions(ids, vocab, rng, mask_rate) for ids in token_batches]
    if not any(selections):
        selections = [select_mask_positions(ids, vocab, rng, mask_rate) for ids in token_batches]
    if not any(selections):
        return Tensor(np.array(0.0)), 0
    logit_rows, targets = [], []
    for item, (ids, positions) in enumerate(zip(token_batches, selections)):
        if not positions:
            continue
        masked = list(ids)
        for pos in positions:
            masked[pos] = vocab.mask_id
        mask = None if visibility is None else visibility[item]
        states = model.encode_text(masked)
        text_mask = np.array([t != vocab.pad_id for t in masked])
        fused = model.fuse(states, model.encode_image(grids[item], mask), mask, text_mask)
        logit_rows.append(tensor.take_rows(model.mlm_logits(fused), positions))
        targets.extend(ids[pos] for pos in positions)
    return ops.softmax_cross_entropy(tensor.concat_rows(logit_rows), targets), len(targets)


def visual_mask_from_bbox(bbox: BBox, grid_size: int) -> np.ndarray:
    """Patch visible iff its cell intersects the box with positive area."""
    mask = np.zeros((grid_size, grid_size), dtype=bool)
    for row, col in patches_touching(bbox, grid_size):
        mask[row, col] = True
    return mask


def bbox_loss_terms(pred_corners: Tensor, target: BBox) -> Tensor:
    """L1 over corner coordinates plus (1 - generalized IoU)."""
    tx1, ty1, tx2, ty2 = target.corners()
    t = Tensor(np.array([[tx1, ty1, tx2, ty2]]))
    l1 = tensor.tsum(tensor.absolute(tensor.sub(pred_corners, t)))

    def col(src, i):
        return tensor.slice_cols(src, i, i + 1)

    px1, py1, px2, py2 = (col(pred_corners, i) for i in range(4))
    zero = Tensor(np.zeros((1, 1)))
    inter_w = tensor.maximum(tensor.sub(tensor.minimum(px2, Tensor([[tx2]])),
                                        tensor.maximum(px1, Tensor([[tx1]]))), zero)
    inter_h = tensor.maximum(tensor.sub(tensor.minimum(py2, Tensor([[ty2]])),
                                        tensor.maximum(py1, Tensor([[ty1]]))), zero)
    inter = tensor.mul(inter_w, inter_h)
    pred_area = tensor.mul(tensor.sub(px2, px1), tensor.sub(py2, py1))
    union = tensor.sub(tensor.add(pred_area, Tensor([[target.area()]])), inter)
    iou = tensor.div(inter, union)
    enclose_w = tensor.sub(tensor.maximum(px2, Tensor([[tx2]])),
                           tensor.minimum(px1, Tensor([[tx1]])))
    enclose_h = tensor.sub(tensor.maximum(py2, Tensor([[ty2]])),
                           tensor.minimum(py1, Tensor([[ty1]])))
    enclose = tensor.mul(enclose_w, enclose_h)
    giou = tensor.sub(iou, tensor.div(tensor.sub(enclose, union), enclose))
    penalty = tensor.sub(Tensor([[1.0]]), giou)
    return tensor.add(l1, tensor.tsum(penalty))


def bbox_loss(predicted: BBox, target: BBox) -> float:
    corners = Tensor(np.array([predicted.corners()]))
    return bbox_loss_terms(corners, target).item()


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU of two boxes (value in (-1, 1])."""
    inter_w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    inter_h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = inter_w * inter_h
    union = a.area() + b.area() - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclose - union) / enclose


# -- batch-level composition -----------------------------------------------------


def _wrapped_ids(model: VLModel, sample) -> list[int]:
    return model.config.vocab.encode_wrapped(sample.text)


def _pevl_ids(model: VLModel, sample: DetectionSample) -> list[int]:
    tokens = sample.text.split()
    augmented = model.encode_position_tokens(tokens, sample.bbox, sample.entity_span_end)
    return model.config.vocab.encode_wrapped(augmented)


def _detection_ids(model: VLModel, sample: DetectionSample, pevl: bool) -> list[int]:
    return _pevl_ids(model, sample) if pevl else _wrapped_ids(model, sample)


def pevl_mlm_loss(model: VLModel, batch_samples: Sequence[DetectionSample],
                  rng: np.random.Generator,
                  mask_rate: float = MLM_MASK_RATE) -> tuple[Tensor, int]:
    """Masked-LM over position-augmented detection text (words and bins mix)."""
    ids = [_pevl_ids(model, s) for s in batch_samples]
    grids = [s.scene.grid for s in batch_samples]
    return mlm_loss(model, ids, grids, rng, mask_rate)


def vma_losses(model: VLModel, batch_samples: Sequence[DetectionSample],
               rng: np.random.Generator,
               mask_rate: float = MLM_MASK_RATE) -> tuple[Tensor, Tensor, tuple[Tensor, int]]:
    """Contrastive/matching/masked-LM with vision restricted to the target box."""
    grid_size = model.config.patch_grid
    visibility = [visual_mask_from_bbox(s.bbox, grid_size) for s in batch_samples]
    grids = [s.scene.grid for s in batch_samples]
    ids = [_wrapped_ids(model, s) for s in batch_samples]
    encoded = [
        model.encode_pair(g, i, v) for g, i, v in zip(grids, ids, visibility)
    ]
    image_feats = tensor.concat_rows([e.image_feat for e in encoded])
    text_feats = tensor.concat_rows([e.text_feat for e in encoded])
    cl = contrastive_loss(image_feats, text_feats, model.temperature())
    itm = itm_loss(model, encoded, grids, visibility)
    mlm = mlm_loss(model, ids, grids, rng, mask_rate, visibility)
    return cl, itm, mlm


def training_step(model: VLModel, batch: Batch, config: AblationConfig,
                  optimizer: SgdOptimizer, rng: np.random.Generator) -> LossBundle:
    """Run every active pass for one batch, then apply a single update."""
    if batch.kind == "caption":
        if "captions" not in config.sources:
            raise ValidationError("caption batch scheduled but captions source inactive")
        if not all(isinstance(s, CaptionSample) for s in batch.samples):
            raise ValidationError("caption batch contains non-caption samples")
        is_detection = False
    elif batch.kind == "detection":
        if not config.detection_active:
            raise ValidationError("detection batch scheduled but no detection source active")
        if not all(isinstance(s, DetectionSample) for s in batch.samples):
            raise ValidationError("detection batch contains non-detection samples")
        is_detection = True
    else:
        raise ValidationError(f"unknown batch kind {batch.kind!r}")

    grids = [s.scene.grid for s in batch.samples]
    if is_detection:
        ids = [_detection_ids(model, s, config.use_pevl_tokens) for s in batch.samples]
    else:
        ids = [_wrapped_ids(model, s) for s in batch.samples]

    encoded = [model.encode_pair(g, i) for g, i in zip(grids, ids)]
    image_feats = tensor.concat_rows([e.image_feat for e in encoded])
    text_feats = tensor.concat_rows([e.text_feat for e in encoded])

    terms: dict[str, Tensor] = {}
    terms["cl"] = contrastive_loss(image_feats, text_feats, model.temperature())
    terms["itm"] = itm_loss(model, encoded, grids)
    mlm_term, mlm_count = mlm_loss(model, ids, grids, rng)
    if mlm_count > 0:
        terms["mlm"] = mlm_term

    if is_detection and config.use_vma:
        vma_cl, vma_itm, (vma_mlm, vma_mlm_count) = vma_losses(model, batch.samples, rng)
        terms["vma_cl"] = vma_cl
        terms["vma_itm"] = vma_itm
        if vma_mlm_count > 0:
            terms["vma_mlm"] = vma_mlm
    if is_detection and config.use_bbox:
        per_box = [
            bbox_loss_terms(model.bbox_corners(e.cross_cls), s.bbox)
            for e, s in zip(encoded, batch.samples)
        ]
        terms["bbox"] = tensor.scale(tensor.add_scalars(per_box), 1.0 / len(per_box))

    total = tensor.add_scalars(list(terms.values()))
    total.backward()
    optimizer.step()

    values = {name: t.item() for name, t in terms.items()}
    return LossBundle(
        **{name: values.get(name, 0.0) for name in LOSS_COMPONENTS},
        total=total.item(),
        active=frozenset(values),
    )
