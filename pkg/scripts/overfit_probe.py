"""Overfit calibration probe (not part of the package)."""
import sys

from finegrain.model import ModelConfig, VLModel
from finegrain import synthdata as sd
from finegrain.objectives import AblationConfig, SgdOptimizer, training_step
from finegrain.seeding import rng_for


def micro(seed, pevl=False):
    return VLModel(ModelConfig(patch_grid=2, hidden_dim=8, vision_layers=1, text_layers=1,
                               cross_layers=1, heads=2, proj_dim=4, mlp_dim=16, max_len=24,
                               use_pevl_tokens=pevl), seed=seed)


def det_batch(n=2, seed=3):
    samples, i = [], 0
    while len(samples) < n:
        scene = sd.generate_scene(seed, i, grid_size=2)
        i += 1
        dets = [d for d in sd.detections_of(scene) if d.kind == "attribute_label"]
        if dets:
            samples.append(dets[0])
    return sd.Batch("detection", tuple(samples))


def cap_batch(n=2, seed=11):
    return sd.Batch("caption", tuple(
        sd.caption_of(sd.generate_scene(seed, i, grid_size=2)) for i in range(n)))


ARMS = {
    "A": (dict(use_vma=False, use_bbox=False, sources=frozenset({"captions"})), "caption"),
    "A+VMA": (dict(use_vma=True, use_bbox=False,
                   sources=frozenset({"captions", "attribute_labels"})), "detection"),
    "A+bbox": (dict(use_vma=False, use_bbox=True,
                    sources=frozenset({"captions", "attribute_labels"})), "detection"),
    "full": (dict(use_vma=True, use_bbox=True,
                  sources=frozenset({"captions", "attribute_labels"})), "detection"),
    "pevl": (dict(use_vma=False, use_bbox=False, use_pevl_tokens=True,
                  sources=frozenset({"captions", "attribute_labels"})), "detection"),
}

for lr in [float(v) for v in sys.argv[1:]] or (0.05,):
    print(f"--- lr={lr}", flush=True)
    for name, (kw, kind) in ARMS.items():
        model = micro(29, pevl=kw.get("use_pevl_tokens", False))
        config = AblationConfig(**kw)
        opt = SgdOptimizer(model.parameters(), lr=lr, clip_norm=1.0)
        batch = det_batch() if kind == "detection" else cap_batch()
        first = hit = None
        last = None
        for step in range(500):
            b = training_step(model, batch, config, opt, rng_for(step, "overfit"))
            if first is None:
                first = b.total
            if hit is None and b.total < 0.1 * first:
                hit = step + 1
            last = b.total
        print(f"  {name:7s} first={first:6.2f} last={last:8.4f} "
              f"ratio={last / first:.3f}  <10% at step {hit}", flush=True)
